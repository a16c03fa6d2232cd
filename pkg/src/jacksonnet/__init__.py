"""Closed Jackson networks: product-form laws, ensembles and bike-share sizing."""

from .errors import (
    AbsorbingStateError,
    DomainError,
    DPCapExceeded,
    InfeasibleError,
    JacksonError,
    NotIrreducibleError,
    ProductFormError,
    StateSpaceTooLarge,
    SupportMismatchError,
)
from .netmodel import (
    INF,
    NetworkSpec,
    NodeKind,
    NodeSpec,
    Policy,
    check_reversibility,
    infinite,
    invariant_vector,
    single,
    utilizations,
    validate_network,
)
from .dists import Geometric, Poisson, TruncatedGeometric
from .ensemble import canonical_law, grand_canonical, mean_total, partition_function, solve_gamma

__all__ = [
    "AbsorbingStateError", "DomainError", "DPCapExceeded", "InfeasibleError", "JacksonError",
    "NotIrreducibleError", "ProductFormError", "StateSpaceTooLarge", "SupportMismatchError",
    "INF", "NetworkSpec", "NodeKind", "NodeSpec", "Policy", "check_reversibility", "infinite",
    "invariant_vector", "single", "utilizations", "validate_network",
    "Geometric", "Poisson", "TruncatedGeometric",
    "canonical_law", "grand_canonical", "mean_total", "partition_function", "solve_gamma",
]
