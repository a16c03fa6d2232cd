"""Exception types raised by the library."""


class JacksonError(Exception):
    """Base class for every error raised by jacksonnet."""


class NotIrreducibleError(JacksonError):
    pass


class DomainError(JacksonError):
    """A chemical potential lies outside the convergence domain."""


class InfeasibleError(JacksonError):
    """No finite chemical potential reproduces the requested population."""


class ProductFormError(JacksonError):
    """The requested dynamics is not known to have a product-form law."""


class StateSpaceTooLarge(JacksonError):
    pass


class AbsorbingStateError(JacksonError):
    pass


class SupportMismatchError(JacksonError):
    pass


class DPCapExceeded(JacksonError):
    """A convolution table would exceed the configured cell budget."""
