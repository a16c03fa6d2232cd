"""Grand canonical construction and exact canonical laws by convolution.

The canonical law of a closed network conditions independent free variables
on their sum. Every probability here is computed exactly from convolution
tables; the Gaussian (local limit) approximations are exposed separately
and are never substituted for the exact tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from . import dists
from .dists import FreeMarginal, Geometric, Poisson, TruncatedGeometric
from .errors import DomainError, DPCapExceeded, InfeasibleError, JacksonError, SupportMismatchError
from .netmodel import NetworkSpec, NodeKind, utilizations

DP_CELL_CAP = 10**8
SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# node layout and total mean
# ---------------------------------------------------------------------------


@dataclass
class _Layout:
    """Utilizations split by free-marginal family, for vectorised sums."""

    r: np.ndarray
    geo: np.ndarray  # indices of single-server, infinite-capacity nodes
    poi: np.ndarray  # indices of infinite-server nodes
    trunc: dict = field(default_factory=dict)  # capacity -> node indices

    @classmethod
    def build(cls, spec: NetworkSpec, theta) -> "_Layout":
        r = utilizations(theta, spec)
        geo, poi, trunc = [], [], {}
        for j, nd in enumerate(spec.nodes):
            if nd.kind is NodeKind.INFINITE:
                poi.append(j)
            elif nd.finite:
                trunc.setdefault(int(nd.capacity), []).append(j)
            else:
                geo.append(j)
        return cls(r, np.array(geo, dtype=int), np.array(poi, dtype=int),
                   {c: np.array(ix, dtype=int) for c, ix in trunc.items()})

    @property
    def unbounded(self) -> bool:
        return len(self.geo) > 0 or len(self.poi) > 0

    @property
    def total_capacity(self) -> int:
        return sum(c * len(ix) for c, ix in self.trunc.items())

    def gamma_sup(self) -> float:
        """Radius of convergence of the product of node series."""
        if len(self.geo):
            return 1.0 / self.r[self.geo].max()
        return math.inf

    def check_domain(self, gamma: float) -> None:
        if gamma < 0:
            raise DomainError("chemical potential must be nonnegative")
        if len(self.geo) and gamma * self.r[self.geo].max() >= 1.0:
            raise DomainError(
                f"gamma={gamma!r} outside convergence domain (needs gamma < {self.gamma_sup()!r})"
            )

    def mean_var(self, gamma: float) -> tuple[float, float]:
        self.check_domain(gamma)
        mean = var = 0.0
        if len(self.geo):
            rho = gamma * self.r[self.geo]
            mean += float(np.sum(rho / (1.0 - rho)))
            var += float(np.sum(rho / (1.0 - rho) ** 2))
        if len(self.poi):
            lam = float(np.sum(gamma * self.r[self.poi]))
            mean += lam
            var += lam
        for c, ix in self.trunc.items():
            m, v = dists.trunc_geom_mean_var(gamma * self.r[ix], c)
            mean += float(m.sum())
            var += float(v.sum())
        return mean, var

    def marginals(self, gamma: float, nodes: Sequence[int]) -> list[FreeMarginal]:
        self.check_domain(gamma)
        out = []
        geo, poi = set(self.geo.tolist()), set(self.poi.tolist())
        cap_of = {int(j): c for c, ix in self.trunc.items() for j in ix}
        for j in nodes:
            rho = gamma * self.r[j]
            if j in poi:
                out.append(Poisson(rho))
            elif j in geo:
                out.append(Geometric(rho))
            else:
                out.append(TruncatedGeometric(rho, cap_of[j]))
        return out


def mean_total(spec: NetworkSpec, theta, gamma: float) -> float:
    """Total mean of the free variables at chemical potential ``gamma``."""
    return _Layout.build(spec, theta).mean_var(gamma)[0]


def solve_gamma(spec: NetworkSpec, theta, M: Optional[int] = None) -> float:
    """Chemical potential whose free variables have total mean ``M``.

    Bracketed bisection followed by Newton polishing (the derivative of the
    total mean is ``variance / gamma``).
    """
    M = spec.customers if M is None else M
    if M < 0:
        raise InfeasibleError("negative population")
    if M == 0:
        return 0.0
    lay = _Layout.build(spec, theta)
    if not lay.unbounded:
        cap = lay.total_capacity
        if M == cap:
            raise InfeasibleError(f"no finite gamma: M equals total capacity {cap}")
        if M > cap:
            raise InfeasibleError(f"M exceeds total capacity ({M} > {cap})")
    f = lambda g: lay.mean_var(g)[0]

    lo = 0.0
    if len(lay.geo):
        hi = (1.0 - 1e-12) * lay.gamma_sup()
        if f(hi) < M:
            raise InfeasibleError("population too large for the convergence domain")
    else:
        hi = 1.0 / lay.r.max()
        while f(hi) < M:
            lo, hi = hi, 2.0 * hi
            if not math.isfinite(hi):
                raise InfeasibleError("no finite gamma found")
    width = 1e-14 * (hi - lo)
    tol = 1e-10 * max(1.0, M)
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if val < M:
            lo = mid
        else:
            hi = mid
        if abs(val - M) <= 1e-3 * tol:
            lo = hi = mid
            break
    gamma = 0.5 * (lo + hi)
    best, best_res = gamma, abs(f(gamma) - M)
    for _ in range(8):
        m, v = lay.mean_var(gamma)
        if v <= 0 or best_res == 0:
            break
        step = (m - M) * gamma / v
        cand = gamma - step
        if not (0 < cand < lay.gamma_sup()):
            break
        res = abs(f(cand) - M)
        if res >= best_res:
            break
        best, best_res, gamma = cand, res, cand
    if best_res > tol:
        raise JacksonError(f"gamma solver did not converge (residual {best_res:g})")
    return best


# ---------------------------------------------------------------------------
# grand canonical ensemble
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrandCanonical:
    gamma: float
    marginals: tuple
    a: float
    b2: float

    @property
    def b(self) -> float:
        return math.sqrt(self.b2)


def free_marginals(spec: NetworkSpec, theta, gamma: float) -> list[FreeMarginal]:
    lay = _Layout.build(spec, theta)
    return lay.marginals(gamma, range(spec.size))


def grand_canonical(spec: NetworkSpec, theta, gamma: float) -> GrandCanonical:
    lay = _Layout.build(spec, theta)
    a, b2 = lay.mean_var(gamma)
    return GrandCanonical(float(gamma), tuple(lay.marginals(gamma, range(spec.size))), a, b2)


# ---------------------------------------------------------------------------
# exact convolution tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaledTable:
    """A nonnegative vector stored as ``values * exp(log_scale)``."""

    values: np.ndarray
    log_scale: float

    def log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.values) + self.log_scale

    def linear(self) -> np.ndarray:
        return self.values * math.exp(self.log_scale)

    def at(self, m: int) -> float:
        """log of entry ``m`` (``-inf`` when out of range or zero)."""
        if m < 0 or m >= len(self.values) or self.values[m] == 0:
            return -math.inf
        return math.log(self.values[m]) + self.log_scale


def _delta_table(length: int) -> ScaledTable:
    v = np.zeros(length)
    v[0] = 1.0
    return ScaledTable(v, 0.0)


def _renormalize(v: np.ndarray, log_scale: float) -> ScaledTable:
    top = v.max()
    if top <= 0:
        return ScaledTable(v, -math.inf)
    return ScaledTable(v / top, log_scale + math.log(top))


def scaled_pmf(d: FreeMarginal, upto: int) -> ScaledTable:
    lp = dists.log_pmf_array(d, upto)
    shift = lp.max()
    return ScaledTable(np.exp(lp - shift), float(shift))


def convolve_into(table: ScaledTable, d: FreeMarginal) -> ScaledTable:
    """Law of ``S + X`` restricted to the same range, ``S`` given by ``table``."""
    n = len(table.values)
    x = table.values
    if isinstance(d, Geometric) and d.rho > 0:
        # h(m) = (1 - rho) x(m) + rho h(m - 1)
        y = lfilter([1.0 - d.rho], [1.0, -d.rho], x)
        return _renormalize(np.maximum(y, 0.0), table.log_scale)
    p = scaled_pmf(d, n - 1)
    nz = np.nonzero(p.values)[0]
    lo, hi = nz[0], nz[-1]
    y = np.zeros(n)
    if lo < n:
        conv = np.convolve(x[: n - lo], p.values[lo : hi + 1])[: n - lo]
        y[lo:] = conv
    return _renormalize(y, table.log_scale + p.log_scale)


def exact_sum_pmf(marginals: Sequence[FreeMarginal], M: int) -> ScaledTable:
    """``P(sum of marginals = m)`` for ``m = 0..M`` by exact convolution."""
    if not len(marginals):
        raise ValueError("need at least one marginal")
    table = _delta_table(M + 1)
    for d in marginals:
        table = convolve_into(table, d)
    return table


class CanonicalLaw:
    """Exact law of the occupancies conditioned on ``sum = M``.

    Suffix tables ``T_k(m) = P(eta_k + ... + eta_{N-1} = m)`` are built right
    to left once; joint laws of a prefix and single-node marginals are read
    off them.
    """

    def __init__(self, marginals: Sequence[FreeMarginal], M: int, gamma: float = math.nan):
        self.marginals = tuple(marginals)
        self.M = int(M)
        self.gamma = gamma
        n = len(self.marginals)
        if n * (self.M + 1) > DP_CELL_CAP:
            raise DPCapExceeded(f"DP table of {n * (self.M + 1)} cells exceeds cap {DP_CELL_CAP}")
        tables = [None] * (n + 1)
        tables[n] = _delta_table(self.M + 1)
        for k in range(n - 1, -1, -1):
            tables[k] = convolve_into(tables[k + 1], self.marginals[k])
        self._suffix = tables
        self.log_norm = tables[0].at(self.M)
        if not math.isfinite(self.log_norm):
            raise JacksonError("state space empty or unreachable mass")

    @property
    def size(self) -> int:
        return len(self.marginals)

    def suffix(self, k: int) -> ScaledTable:
        return self._suffix[k]

    def log_total_prob(self, total: Optional[int] = None) -> float:
        """``log P(sum of all free variables = total)``."""
        return self._suffix[0].at(self.M if total is None else total)

    def joint(self, prefix: Sequence[int]) -> float:
        """``P(xi_0 = n_0, ..., xi_{K-1} = n_{K-1})`` for the leading nodes."""
        K = len(prefix)
        s = int(sum(prefix))
        if s > self.M or min(prefix, default=0) < 0:
            return 0.0
        logp = 0.0
        for d, nj in zip(self.marginals[:K], prefix):
            pj = dists.log_pmf_array(d, int(nj))[int(nj)]
            if pj == -math.inf:
                return 0.0
            logp += pj
        tail = self._suffix[K].at(self.M - s)
        if tail == -math.inf:
            return 0.0
        return math.exp(logp + tail - self.log_norm)

    def marginal(self, j: int, total: Optional[int] = None) -> np.ndarray:
        """Law of ``xi_j`` over ``0..min(c_j, total)`` (normalised)."""
        total = self._check_total(total)
        before = _delta_table(total + 1)
        for k in range(j):
            before = convolve_into(before, self.marginals[k])
        return self._marginal_from(before, j, total)

    def marginals_all(self, total: Optional[int] = None, nodes: Optional[Sequence[int]] = None) -> dict:
        """Marginals of several nodes in one forward sweep (all nodes by default)."""
        total = self._check_total(total)
        wanted = set(range(self.size) if nodes is None else nodes)
        out = {}
        before = _delta_table(total + 1)
        for j in range(max(wanted) + 1 if wanted else 0):
            if j in wanted:
                out[j] = self._marginal_from(before, j, total)
            before = convolve_into(before, self.marginals[j])
        return out

    def _check_total(self, total: Optional[int]) -> int:
        total = self.M if total is None else int(total)
        if total > self.M or total < 0:
            raise ValueError("total outside the tabulated population range")
        return total

    def _marginal_from(self, before: ScaledTable, j: int, total: int) -> np.ndarray:
        d = self.marginals[j]
        top = min(total, d.cap) if isinstance(d, TruncatedGeometric) else total
        after = self._suffix[j + 1]
        lp = dists.log_pmf_array(d, top)
        rest = np.full(top + 1, -math.inf)
        bv = before.values[: total + 1]
        av = after.values[: total + 1]
        for n in range(top + 1):
            r = total - n
            val = float(np.dot(bv[: r + 1], av[r::-1]))
            if val > 0:
                rest[n] = math.log(val)
        logw = lp + rest
        if not np.isfinite(logw).any():
            raise JacksonError("state space empty or unreachable mass")
        logw -= logw.max()
        w = np.exp(logw)
        return w / w.sum()

    def mean(self, j: int) -> float:
        p = self.marginal(j)
        return float(np.dot(p, np.arange(len(p))))


def canonical_law(spec: NetworkSpec, theta, M: Optional[int] = None, gamma: Optional[float] = None) -> CanonicalLaw:
    M = spec.customers if M is None else int(M)
    if gamma is None:
        lay = _Layout.build(spec, theta)
        if M > 0 and (lay.unbounded or M < lay.total_capacity):
            gamma = solve_gamma(spec, theta, M)
        else:
            # any admissible gauge; the full-network state has no free chemical potential
            if not lay.unbounded and M > lay.total_capacity:
                raise InfeasibleError(f"M exceeds total capacity ({M} > {lay.total_capacity})")
            sup = lay.gamma_sup()
            gamma = 0.5 * sup if math.isfinite(sup) else 1.0
    if gamma <= 0:
        raise DomainError("canonical tables need a positive gamma")
    return CanonicalLaw(free_marginals(spec, theta, gamma), M, gamma)


# ---------------------------------------------------------------------------
# partition function
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionFunction:
    log_exact: float
    log_approx: float


def partition_function(spec: NetworkSpec, theta, M: Optional[int] = None,
                       gamma: Optional[float] = None) -> PartitionFunction:
    """``log Z`` exactly and by the Gaussian local approximation.

    Weights are ``r_j^n`` for single-server and ``r_j^n / n!`` for
    infinite-server nodes, with ``r = theta / mu``.
    """
    M = spec.customers if M is None else int(M)
    if M == 0:
        return PartitionFunction(0.0, 0.0)
    lay = _Layout.build(spec, theta)
    g_star = solve_gamma(spec, theta, M)
    g = g_star if gamma is None else gamma
    margs = lay.marginals(g, range(spec.size))
    log_zi = sum(dists.log_normalizer(d) for d in margs)
    table = exact_sum_pmf(margs, M)
    log_exact = -M * math.log(g) + log_zi + table.at(M)
    margs_star = lay.marginals(g_star, range(spec.size))
    _, b2 = lay.mean_var(g_star)
    log_zi_star = sum(dists.log_normalizer(d) for d in margs_star)
    log_approx = -M * math.log(g_star) + log_zi_star - math.log(math.sqrt(b2) * SQRT_2PI)
    return PartitionFunction(log_exact, log_approx)


# ---------------------------------------------------------------------------
# local limit theorem report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LltReport:
    a: float
    b: float
    ks: np.ndarray
    exact: np.ndarray
    gaussian: np.ndarray
    deviations: np.ndarray
    sup_deviation: float

    def gaussian_approx(self, k) -> np.ndarray:
        return gaussian_density(np.asarray(k, dtype=float), self.a, self.b)


def gaussian_density(k, a: float, b: float):
    return np.exp(-((k - a) ** 2) / (2.0 * b * b)) / (b * SQRT_2PI)


def llt_report(gc: GrandCanonical, k_range: Sequence[int], marginals: Optional[Sequence[FreeMarginal]] = None) -> LltReport:
    """Compare ``b sqrt(2 pi) P(S = k)`` with ``exp(-(k - a)^2 / 2 b^2)`` over ``k_range``."""
    margs = gc.marginals if marginals is None else marginals
    if gc.b2 <= 0:
        raise JacksonError("LLT report needs positive variance")
    ks = np.asarray(list(k_range), dtype=int)
    table = exact_sum_pmf(margs, int(ks.max()))
    exact = np.exp(table.log()[ks])
    b = math.sqrt(gc.b2)
    gauss = np.exp(-((ks - gc.a) ** 2) / (2.0 * gc.b2))
    dev = np.abs(b * SQRT_2PI * exact - gauss)
    return LltReport(gc.a, b, ks, exact, gauss, dev, float(dev.max()))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    gamma: float
    max_single_load: float  # max gamma r_j over infinite-capacity single-server nodes
    max_capacity: float  # max finite capacity over single-server nodes
    b: float
    prefix_route_term: float  # b^-1 * sum of gamma r_j over infinite-server nodes in the prefix
    lyapunov: float
    flags: tuple

    def as_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "max_single_load": self.max_single_load,
            "max_capacity": self.max_capacity,
            "b": self.b,
            "prefix_route_term": self.prefix_route_term,
            "lyapunov": self.lyapunov,
            "flags": list(self.flags),
        }


def condition_diagnostics(spec: NetworkSpec, theta, gamma: float, K: int = 1,
                          near_critical: float = 0.95, route_flag: float = 0.5) -> ConditionReport:
    """Finite-size readings of the equivalence-of-ensembles conditions."""
    lay = _Layout.build(spec, theta)
    _, b2 = lay.mean_var(gamma)
    b = math.sqrt(b2)
    loads = gamma * lay.r
    max_load = float(loads[lay.geo].max()) if len(lay.geo) else 0.0
    caps = [c for c in lay.trunc] if lay.trunc else []
    max_cap = float(max(caps)) if caps else math.inf
    prefix_poi = [j for j in lay.poi if j < K]
    route_term = float(loads[prefix_poi].sum() / b) if (prefix_poi and b > 0) else 0.0
    flags = []
    if len(lay.geo) and max_load >= near_critical:
        flags.append(f"single-server load {max_load:.6g} close to 1 (condensation risk)")
    if route_term > route_flag:
        flags.append(f"prefix infinite-server term {route_term:.6g} not small against b")
    if b < 1.0:
        flags.append("b < 1: no local limit regime")
    try:
        lyap = dists.lyapunov_ratio(lay.marginals(gamma, range(spec.size)))
    except JacksonError:
        lyap = math.inf
    return ConditionReport(float(gamma), max_load, max_cap, b, route_term, lyap, tuple(flags))


@dataclass(frozen=True)
class EquivalenceReport:
    gamma: float
    ratio: float
    canonical_joint: float
    free_joint: float
    tv: dict


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    n = max(len(p), len(q))
    pp = np.zeros(n)
    qq = np.zeros(n)
    pp[: len(p)] = p
    qq[: len(q)] = q
    return 0.5 * float(np.abs(pp - qq).sum())


def equivalence_error(spec: NetworkSpec, theta, M: Optional[int], prefix: Sequence[int],
                      nodes: Optional[Sequence[int]] = None, law: Optional[CanonicalLaw] = None) -> EquivalenceReport:
    """Canonical vs grand canonical: joint ratio on a prefix and per-node TV."""
    M = spec.customers if M is None else int(M)
    gamma = solve_gamma(spec, theta, M)
    if law is None:
        law = CanonicalLaw(free_marginals(spec, theta, gamma), M, gamma)
    free = free_marginals(spec, theta, gamma)
    canon = law.joint(prefix)
    logf = 0.0
    for d, nj in zip(free, prefix):
        logf += dists.log_pmf_array(d, int(nj))[int(nj)]
    free_joint = math.exp(logf)
    if free_joint == 0.0:
        if canon > 0:
            raise SupportMismatchError("support mismatch: free probability zero where canonical is not")
        ratio = math.nan
    else:
        ratio = canon / free_joint
    tv = {}
    for j in nodes if nodes is not None else range(len(prefix)):
        p = law.marginal(j)
        q = dists.pmf_array(free[j], len(p) - 1)
        tail = max(0.0, 1.0 - q.sum())
        tv[j] = total_variation(p, q) + 0.5 * tail
    return EquivalenceReport(gamma, ratio, canon, free_joint, tv)
