"""Free marginal families: geometric, truncated geometric and Poisson.

All pmf evaluations go through log space so that very large or very small
parameters do not overflow. Truncated geometric moments are always direct
finite sums, which keeps the ``rho == 1`` case free of 0/0 terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import JacksonError

# tail mass below which unbounded supports are cut when summing moments
_TAIL_EPS = 1e-20


@dataclass(frozen=True)
class Geometric:
    rho: float

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"geometric parameter must lie in [0, 1), got {self.rho}")


@dataclass(frozen=True)
class TruncatedGeometric:
    rho: float
    cap: int

    def __post_init__(self):
        if self.rho < 0 or not math.isfinite(self.rho):
            raise ValueError(f"truncated geometric parameter must be finite and >= 0, got {self.rho}")
        if self.cap < 0 or int(self.cap) != self.cap:
            raise ValueError(f"capacity must be a nonnegative integer, got {self.cap}")
        object.__setattr__(self, "cap", int(self.cap))


@dataclass(frozen=True)
class Poisson:
    lam: float

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError(f"Poisson parameter must be finite and >= 0, got {self.lam}")


FreeMarginal = Union[Geometric, TruncatedGeometric, Poisson]


@dataclass(frozen=True)
class MomentSummary:
    mean: float
    var: float
    third_abs: float
    gnedenko_s: float


def support_max(d: FreeMarginal) -> int:
    """Largest value carrying non-negligible mass (exact for truncated laws)."""
    if isinstance(d, TruncatedGeometric):
        return d.cap
    if isinstance(d, Geometric):
        if d.rho == 0:
            return 0
        return int(math.ceil(math.log(_TAIL_EPS) / math.log(d.rho))) + 1
    if d.lam == 0:
        return 0
    return int(math.ceil(d.lam + 40.0 * math.sqrt(d.lam) + 50))


def log_pmf_array(d: FreeMarginal, upto: int) -> np.ndarray:
    """``log P(X = k)`` for ``k = 0..upto`` (``-inf`` outside the support)."""
    k = np.arange(upto + 1, dtype=float)
    out = np.full(upto + 1, -np.inf)
    if isinstance(d, Geometric):
        if d.rho == 0:
            out[0] = 0.0
        else:
            out[:] = math.log1p(-d.rho) + k * math.log(d.rho)
    elif isinstance(d, TruncatedGeometric):
        top = min(upto, d.cap)
        if d.rho == 0:
            out[0] = 0.0
        else:
            # weights relative to the mode keep exp() arguments small
            lr = math.log(d.rho)
            mode = d.cap if lr > 0 else 0
            logz = logsumexp((np.arange(d.cap + 1) - mode) * lr)
            out[: top + 1] = (k[: top + 1] - mode) * lr - logz
    else:
        if d.lam == 0:
            out[0] = 0.0
        else:
            out[:] = k * math.log(d.lam) - d.lam - gammaln(k + 1)
    return out


def pmf_array(d: FreeMarginal, upto: int) -> np.ndarray:
    return np.exp(log_pmf_array(d, upto))


def pmf(d: FreeMarginal, k: int) -> float:
    if k < 0 or int(k) != k:
        return 0.0
    return float(pmf_array(d, int(k))[int(k)])


def _support_pmf(d: FreeMarginal) -> np.ndarray:
    p = pmf_array(d, support_max(d))
    return p


def log_normalizer(d: FreeMarginal) -> float:
    """``log Z`` of the power series normalizing the family (``sum rho^n`` etc.)."""
    if isinstance(d, Geometric):
        return -math.log1p(-d.rho)
    if isinstance(d, TruncatedGeometric):
        if d.rho == 0:
            return 0.0
        return float(logsumexp(np.arange(d.cap + 1) * math.log(d.rho)))
    return d.lam


def trunc_geom_mean_var(rho, cap: int):
    """Mean and variance of truncated geometrics sharing one capacity.

    ``rho`` may be an array. Direct finite sums with max-shifted log weights.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if cap == 0:
        z = np.zeros_like(rho)
        return z, z.copy()
    n = np.arange(cap + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(rho)
        logw = np.where(rho[:, None] > 0, n[None, :] * lr[:, None], np.where(n[None, :] == 0, 0.0, -np.inf))
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    mean = w @ n
    var = np.einsum("ij,ij->i", w, (n[None, :] - mean[:, None]) ** 2)
    return mean, var


def _below_mean_correction(d: FreeMarginal, mean: float) -> float:
    """``2 * E[(m - X)^3 ; X < m]``: turns the central third moment into the absolute one."""
    top = int(math.ceil(mean)) - 1
    if top < 0:
        return 0.0
    if top > 50_000_000:
        raise ValueError("mean too large for an exact absolute third moment")
    p = pmf_array(d, top)
    k = np.arange(top + 1, dtype=float)
    return 2.0 * float(np.sum(p * (mean - k) ** 3))


def moments(d: FreeMarginal) -> MomentSummary:
    """Mean, variance, centred absolute third moment and Gnedenko ``s``."""
    if isinstance(d, Geometric):
        rho = d.rho
        mean = rho / (1.0 - rho)
        var = rho / (1.0 - rho) ** 2
        third = rho * (1.0 + rho) / (1.0 - rho) ** 3 + _below_mean_correction(d, mean)
        return MomentSummary(mean, var, third, rho / (1.0 + rho) ** 2)
    if isinstance(d, Poisson):
        lam = d.lam
        third = lam + _below_mean_correction(d, lam)
        return MomentSummary(lam, lam, third, gnedenko_s(_support_pmf(d)))
    m, v = trunc_geom_mean_var(d.rho, d.cap)
    mean, var = float(m[0]), float(v[0])
    p = pmf_array(d, d.cap)
    k = np.arange(d.cap + 1, dtype=float)
    third = float(np.sum(p * np.abs(k - mean) ** 3))
    return MomentSummary(mean, var, third, gnedenko_s(p))


def raw_third_moment(d: FreeMarginal) -> float:
    """``E(X^3)`` in closed form for the unbounded families."""
    if isinstance(d, Geometric):
        rho = d.rho
        return (rho + 4 * rho**2 + rho**3) / (1.0 - rho) ** 3
    if isinstance(d, Poisson):
        lam = d.lam
        return lam**3 + 3 * lam**2 + lam
    p = pmf_array(d, d.cap)
    return float(np.sum(p * np.arange(d.cap + 1, dtype=float) ** 3))


def duality_reflect(d: TruncatedGeometric) -> TruncatedGeometric:
    """Particles-holes dual: the law of ``cap - X``."""
    if not d.rho > 0:
        raise ValueError("duality requires rho > 0")
    return TruncatedGeometric(1.0 / d.rho, d.cap)


def gnedenko_s(p: Sequence[float], offset: int = 0) -> float:
    """``sum_l p_{2l} p_{2l+1} / (p_{2l} + p_{2l+1})`` with 0/0 taken as 0.

    ``p[k]`` is the mass at integer ``offset + k``.
    """
    p = np.asarray(p, dtype=float)
    if offset % 2:
        p = np.concatenate([[0.0], p])
    if len(p) % 2:
        p = np.concatenate([p, [0.0]])
    even, odd = p[0::2], p[1::2]
    den = even + odd
    mask = den > 0
    return float(np.sum(even[mask] * odd[mask] / den[mask]))


def char_modulus(d: FreeMarginal, t) -> np.ndarray | float:
    """``|E exp(itX)|`` (vectorised over ``t``)."""
    t_arr = np.asarray(t, dtype=float)
    if isinstance(d, Geometric):
        rho = d.rho
        out = (1.0 - rho) / np.sqrt(1.0 - 2.0 * rho * np.cos(t_arr) + rho**2)
    elif isinstance(d, Poisson):
        out = np.exp(-2.0 * d.lam * np.sin(t_arr / 2.0) ** 2)
    else:
        p = pmf_array(d, d.cap)
        k = np.arange(d.cap + 1, dtype=float)
        phase = np.exp(1j * np.multiply.outer(t_arr, k))
        out = np.abs(phase @ p)
    return float(out) if np.ndim(out) == 0 else out


def lyapunov_ratio(marginals: Sequence[FreeMarginal]) -> float:
    """``b^-3 * sum_j E|X_j - m_j|^3`` for a family of independent marginals.

    Truncated geometrics contribute their exact centred third moment; the
    unbounded families contribute the upper bound ``E(X^3)``, so the value
    is an upper bound whenever those are present.
    """
    if not marginals:
        raise JacksonError("degenerate family: no marginals")
    num = 0.0
    b2 = 0.0
    for d in marginals:
        mom = moments(d)
        b2 += mom.var
        num += mom.third_abs if isinstance(d, TruncatedGeometric) else raw_third_moment(d)
    if b2 <= 0:
        raise JacksonError("degenerate family: zero total variance")
    return num / b2**1.5


def domination_constant(marginals: Sequence[TruncatedGeometric]) -> float:
    """Smallest ``s / sigma^2`` over the non-degenerate members of a family."""
    ratios = []
    for d in marginals:
        mom = moments(d)
        if mom.var > 0:
            ratios.append(mom.gnedenko_s / mom.var)
    return min(ratios) if ratios else math.inf
