"""Bike-sharing networks: topologies, rerouting matrices, sizing and failure rates.

Stations are single-server nodes (a user picks up a bike at rate ``mu_j``
whenever one is available) and trips are infinite-server route nodes.
Customers of the closed network are the bikes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from . import dists, dynamics, ensemble
from .errors import DomainError, InfeasibleError, JacksonError, NotIrreducibleError
from .netmodel import (NetworkSpec, Policy, check_reversibility, infinite, invariant_vector,
                       is_irreducible, single, utilizations)

W_TOL = 1e-12
GOLDEN_TOL = 1e-6
GOLDEN_SEEDS = 8
STATION_FILL = 0.95


# ---------------------------------------------------------------------------
# specification and builders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BikeShareSpec:
    """Stations plus either detailed routes (``Q``, ``ride_rates``) or one aggregated route node.

    ``station_rates[j]`` is the rate at which users arrive at station ``j``;
    ``capacities[j]`` is an int or ``math.inf``. For the detailed variant
    ``ride_rates[i, j]`` is the trip-completion rate on route ``i -> j`` and
    must be positive exactly where ``Q`` is.
    """

    station_rates: np.ndarray
    capacities: np.ndarray
    variant: str = "detailed"
    Q: Optional[np.ndarray] = None
    ride_rates: Optional[np.ndarray] = None
    popularities: Optional[np.ndarray] = None
    route_rate: float = math.nan

    def __post_init__(self):
        object.__setattr__(self, "station_rates", np.asarray(self.station_rates, dtype=float))
        object.__setattr__(self, "capacities", np.asarray(self.capacities, dtype=float))
        for name in ("Q", "ride_rates", "popularities"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))
        if self.variant not in ("detailed", "aggregated"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.capacities) != len(self.station_rates):
            raise ValueError("capacities and station rates differ in length")

    @property
    def stations(self) -> int:
        return len(self.station_rates)

    @classmethod
    def detailed(cls, station_rates, capacities, Q, ride_rates) -> "BikeShareSpec":
        return cls(station_rates, capacities, "detailed", Q=Q, ride_rates=ride_rates)

    @classmethod
    def aggregated(cls, station_rates, capacities, popularities, route_rate) -> "BikeShareSpec":
        return cls(station_rates, capacities, "aggregated", popularities=popularities, route_rate=float(route_rate))


@dataclass(frozen=True)
class BikeNetwork:
    """A built bike network: the closed network, its invariant vector and node bookkeeping."""

    bike: BikeShareSpec
    spec: NetworkSpec
    theta: np.ndarray
    routes: tuple  # (origin, destination) per route node, in node order after the stations
    nu: np.ndarray  # station invariant vector of Q (popularities for the aggregated variant)

    @property
    def stations(self) -> np.ndarray:
        return np.arange(self.bike.stations)

    @property
    def route_nodes(self) -> np.ndarray:
        return np.arange(self.bike.stations, self.spec.size)

    @property
    def utilizations(self) -> np.ndarray:
        return utilizations(self.theta, self.spec)

    def route_index(self) -> dict:
        J1 = self.bike.stations
        return {od: J1 + k for k, od in enumerate(self.routes)}

    def with_customers(self, M: int) -> "BikeNetwork":
        return BikeNetwork(self.bike, self.spec.with_customers(M), self.theta, self.routes, self.nu)

    def with_policy(self, policy: Policy, provider=None) -> "BikeNetwork":
        return BikeNetwork(self.bike, self.spec.with_policy(policy, provider), self.theta, self.routes, self.nu)


def _default_policy(capacities) -> Policy:
    return Policy.STANDARD if not np.any(np.isfinite(capacities)) else Policy.BLOCKING_REROUTING


def _station_nodes(bs: BikeShareSpec) -> list:
    return [single(mu, c) for mu, c in zip(bs.station_rates, bs.capacities)]


def build_detailed(bs: BikeShareSpec, customers: int = 0, policy: Optional[Policy] = None) -> BikeNetwork:
    """Stations ``0..J1-1`` followed by one infinite-server node per route ``i -> j`` with ``q_ij > 0``."""
    if bs.variant != "detailed":
        raise ValueError("build_detailed needs a detailed bike-share spec")
    Q = bs.Q
    J1 = bs.stations
    if Q is None or Q.shape != (J1, J1):
        raise ValueError(f"Q must be a {J1} x {J1} matrix")
    if np.any(np.diag(Q) != 0):
        raise ValueError("Q must have a zero diagonal (no round trips)")
    if np.any(Q < 0) or np.any(np.abs(Q.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("Q must be row stochastic")
    if not is_irreducible(Q):
        raise NotIrreducibleError("Q not irreducible")
    rides = bs.ride_rates
    if rides is None or rides.shape != Q.shape:
        raise ValueError("ride_rates must match the shape of Q")
    if np.any((rides > 0) != (Q > 0)):
        raise ValueError("route set mismatch: ride rates must be positive exactly on the support of Q")
    nu = invariant_vector(Q).theta
    origin, dest = np.nonzero(Q)
    J2 = len(origin)
    N = J1 + J2
    routes = tuple(zip(origin.tolist(), dest.tolist()))
    rows = np.concatenate([origin, J1 + np.arange(J2)])
    cols = np.concatenate([J1 + np.arange(J2), dest])
    vals = np.concatenate([Q[origin, dest], np.ones(J2)])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
    nodes = _station_nodes(bs) + [infinite(rides[i, j]) for i, j in routes]
    theta = np.concatenate([nu / 2.0, nu[origin] * Q[origin, dest] / 2.0])
    policy = _default_policy(bs.capacities) if policy is None else policy
    spec = NetworkSpec(nodes, P, int(customers), policy)
    return BikeNetwork(bs, spec, theta, routes, nu)


def build_aggregated(bs: BikeShareSpec, customers: int = 0, policy: Optional[Policy] = None) -> BikeNetwork:
    """Stations ``0..J1-1`` plus a final infinite-server node for all trips."""
    if bs.variant != "aggregated":
        raise ValueError("build_aggregated needs an aggregated bike-share spec")
    q = bs.popularities
    J1 = bs.stations
    if q is None or len(q) != J1:
        raise ValueError(f"need {J1} popularities")
    if np.any(q <= 0) or abs(q.sum() - 1.0) > 1e-12:
        raise ValueError("popularities must be positive and sum to 1")
    if not bs.route_rate > 0:
        raise ValueError("route rate must be positive")
    N = J1 + 1
    P = np.zeros((N, N))
    P[:J1, J1] = 1.0
    P[J1, :J1] = q
    theta = np.concatenate([q / 2.0, [0.5]])
    nodes = _station_nodes(bs) + [infinite(bs.route_rate)]
    if policy is None:
        # reversible routing: blocking and rerouting give the same chain
        policy = Policy.STANDARD if not np.any(np.isfinite(bs.capacities)) else Policy.BLOCKING
    spec = NetworkSpec(nodes, P, int(customers), policy)
    return BikeNetwork(bs, spec, theta, (), q.copy())


def build(bs: BikeShareSpec, customers: int = 0, policy: Optional[Policy] = None) -> BikeNetwork:
    if bs.variant == "detailed":
        return build_detailed(bs, customers, policy)
    return build_aggregated(bs, customers, policy)


# ---------------------------------------------------------------------------
# sizing rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FleetSize:
    gamma: float
    M_real: float
    M: int


def fleet_from_delta(net: BikeNetwork, delta: float) -> FleetSize:
    """Fleet whose most loaded station is empty with probability ``delta`` (infinite capacities)."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if np.any(np.isfinite(net.bike.capacities)):
        raise ValueError("fleet_from_delta assumes infinite station capacities")
    r = net.utilizations
    st = net.stations
    gamma = (1.0 - delta) / r[st].max()
    M_real = ensemble.mean_total(net.spec, net.theta, gamma)
    return FleetSize(float(gamma), float(M_real), int(round(M_real)))


def capacity_for_overflow(load: float, eps: float) -> int:
    """Smallest ``n`` with ``load^(n+1) <= eps``: the geometric tail beyond ``n`` bikes."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if load >= 1.0:
        raise DomainError("exceedance does not vanish: load must be below 1")
    if load <= eps:
        return 0
    n = max(0, math.ceil(math.log(eps) / math.log(load)) - 1)
    # guard the float boundary in both directions
    while n > 0 and load ** n <= eps:
        n -= 1
    while load ** (n + 1) > eps:
        n += 1
    return n


def end_probabilities(load: float, cap: int) -> tuple[float, float]:
    """``(P(X = 0), P(X = cap))`` for a truncated geometric, by finite log-sums."""
    if cap == 0:
        return 1.0, 1.0
    if load == 0:
        return 1.0, 0.0
    logz = dists.log_normalizer(dists.TruncatedGeometric(load, cap))
    return math.exp(-logz), math.exp(cap * math.log(load) - logz)


@dataclass(frozen=True)
class CapacityResult:
    feasible: bool
    capacity: Optional[int]
    empty_prob: float
    full_prob: float
    floor: float  # limit of the binding probability as capacity grows
    binding: str  # "empty", "full" or "both"


def _limit_floor(load: float) -> tuple[float, str]:
    if load < 1.0:
        return 1.0 - load, "empty"
    if load > 1.0:
        return 1.0 - 1.0 / load, "full"
    return 0.0, "both"


def capacity_for_both(load: float, eps: float, max_capacity: int = 10**7) -> CapacityResult:
    """Smallest capacity keeping both empty and full probabilities at most ``eps``.

    Both probabilities decrease with the capacity, towards ``1 - load``
    (empty, ``load < 1``) or ``1 - 1/load`` (full, ``load > 1``). When that
    floor is not below ``eps`` no capacity works and the floor is reported.
    """
    if not load > 0:
        raise ValueError("load must be positive")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    floor, binding = _limit_floor(load)
    # the floor is approached from above, so equality is infeasible; allow for rounding in 1 - load
    if floor >= eps * (1.0 - 1e-12):
        e, f = end_probabilities(load, 0)
        return CapacityResult(False, None, e, f, floor, binding)

    def ok(c):
        e, f = end_probabilities(load, c)
        return max(e, f) <= eps

    hi = 1
    while not ok(hi):
        hi *= 2
        if hi > max_capacity:
            raise InfeasibleError("capacity search exceeded its limit")
    lo = hi // 2
    if ok(lo):
        hi = lo
    else:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo = mid
    e, f = end_probabilities(load, hi)
    return CapacityResult(True, hi, e, f, floor, binding)


# ---------------------------------------------------------------------------
# failure rate
# ---------------------------------------------------------------------------


def station_failure_rates(net: BikeNetwork, gamma: float) -> np.ndarray:
    """Per-station ``mu_j (P(empty) + load_j P(full))`` under the free marginals at ``gamma``."""
    r = net.utilizations
    out = np.empty(net.bike.stations)
    for j in net.stations:
        mu = net.bike.station_rates[j]
        c = net.bike.capacities[j]
        load = gamma * r[j]
        if math.isfinite(c):
            e, f = end_probabilities(load, int(c))
            out[j] = mu * (e + load * f)
        else:
            if load >= 1.0:
                raise DomainError("station load must be below 1 with infinite capacity")
            out[j] = mu * (1.0 - load)
    return out


def failure_rate(net: BikeNetwork, gamma: float) -> float:
    """Approximate total failure rate (users meeting an empty station plus riders a full one)."""
    return float(station_failure_rates(net, gamma).sum())


def route_inflow(net: BikeNetwork) -> np.ndarray:
    """``sum_k mu_k r_k p_kj`` over route nodes ``k`` for each station ``j``."""
    P = sp.csr_matrix(net.spec.routing)
    r = net.utilizations
    mu = net.spec.rates
    routes = net.route_nodes
    flow = sp.diags(mu[routes] * r[routes]) @ P[routes]
    return np.asarray(flow.sum(axis=0)).ravel()[: net.bike.stations]


def route_inflow_identity(net: BikeNetwork) -> float:
    """Largest ``|sum_i mu_[ij] r_[ij] - mu_j r_j|`` over stations."""
    st = net.stations
    target = net.spec.rates[st] * net.utilizations[st]
    return float(np.max(np.abs(route_inflow(net) - target)))


def failure_rate_unsimplified(net: BikeNetwork, gamma: float) -> float:
    """Failure rate with the full-station term written as route outflow into each station."""
    r = net.utilizations
    inflow = gamma * route_inflow(net)
    total = 0.0
    for j in net.stations:
        mu = net.bike.station_rates[j]
        c = net.bike.capacities[j]
        load = gamma * r[j]
        if math.isfinite(c):
            e, f = end_probabilities(load, int(c))
        else:
            e, f = 1.0 - load, 0.0
        total += mu * e + inflow[j] * f
    return float(total)


@dataclass(frozen=True)
class ExactFailure:
    tau: float
    empty_part: float
    full_part: float
    gamma: float


def failure_rate_exact(net: BikeNetwork, M: int) -> ExactFailure:
    """Failure rate under the exact product-form law with ``M`` bikes.

    A route node is infinite-server, so ``E[xi_k ; xi_j = c]`` factors as
    ``load_k * P(S = M-1) / P(S = M) * P_{M-1}(xi_j = c)``.
    """
    if M < 1:
        raise ValueError("need at least one bike")
    gamma = ensemble.solve_gamma(net.spec, net.theta, M)
    law = ensemble.canonical_law(net.spec, net.theta, M, gamma)
    ratio = math.exp(law.log_total_prob(M - 1) - law.log_total_prob(M))
    r = net.utilizations
    st = [int(j) for j in net.stations]
    at_M = law.marginals_all(nodes=st)
    at_M1 = law.marginals_all(total=M - 1, nodes=st)
    empty = full = 0.0
    for j in st:
        mu = net.bike.station_rates[j]
        empty += mu * at_M[j][0]
        c = net.bike.capacities[j]
        if math.isfinite(c) and c <= M - 1:
            full += mu * gamma * r[j] * ratio * at_M1[j][int(c)]
    return ExactFailure(empty + full, empty, full, gamma)


@dataclass(frozen=True)
class MonteCarloFailure:
    tau: float
    se: float
    empty_part: float
    blocked_part: float
    events: int


def failure_rate_mc(net: BikeNetwork, M: int, seed: int, events: int = 10_000_000,
                    replicas: int = 1, batches: int = 20, burn_in: Optional[int] = None) -> MonteCarloFailure:
    """Simulated failure rate: time-weighted ``sum mu_j 1{empty}`` plus observed blocked returns."""
    spec = net.spec.with_customers(M)
    res = dynamics.simulate(spec, net.theta, events, seed=seed, replicas=replicas, batches=batches,
                            burn_in=burn_in, hist_levels=0)
    st = net.stations
    mu = net.bike.station_rates
    per_batch = res.batch_empty[:, st] @ mu + res.batch_blocked[:, st].sum(axis=1)
    empty = float(res.empty[st] @ mu)
    blocked = float(res.blocked_rate[st].sum())
    se = float(per_batch.std(ddof=1) / math.sqrt(len(per_batch)))
    return MonteCarloFailure(empty + blocked, se, empty, blocked, res.events)


# ---------------------------------------------------------------------------
# fleet optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationReport:
    empty_prob: float
    full_prob: float
    capacity: float


@dataclass(frozen=True)
class SizingResult:
    gamma: float
    M_real: float
    M: int
    stations: tuple
    tau: float
    gamma_roundtrip_error: float  # relative gap between gamma and solve_gamma(M_real)


def _station_mean(net: BikeNetwork, gamma: float) -> float:
    r = net.utilizations
    total = 0.0
    for j in net.stations:
        m, _ = dists.trunc_geom_mean_var(gamma * r[j], int(net.bike.capacities[j]))
        total += float(m[0])
    return total


def _golden(f, a: float, b: float, tol: float):
    """Golden-section minimum of ``f`` on ``[a, b]``; ties move left."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol * max(1.0, abs(a) + abs(b)) / 2.0:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def sizing_report(net: BikeNetwork, gamma: float) -> SizingResult:
    r = net.utilizations
    reports = []
    for j in net.stations:
        c = net.bike.capacities[j]
        load = gamma * r[j]
        if math.isfinite(c):
            e, f = end_probabilities(load, int(c))
        else:
            e, f = 1.0 - load, 0.0
        reports.append(StationReport(e, f, float(c)))
    M_real = ensemble.mean_total(net.spec, net.theta, gamma)
    back = ensemble.solve_gamma(net.spec, net.theta, M_real) if M_real > 0 else 0.0
    err = abs(back - gamma) / gamma if gamma > 0 else 0.0
    return SizingResult(float(gamma), float(M_real), int(round(M_real)), tuple(reports),
                        failure_rate(net, gamma), float(err))


def optimize_fleet(net: BikeNetwork, tol: float = GOLDEN_TOL, seeds: int = GOLDEN_SEEDS) -> SizingResult:
    """Minimise the approximate failure rate over the chemical potential.

    The search runs in ``log gamma`` from the one-bike value to the value that
    fills the stations to 95% of their capacity, split into ``seeds``
    sub-brackets; the best local minimum is kept, the leftmost on ties.
    """
    caps = net.bike.capacities
    if not np.all(np.isfinite(caps)):
        raise ValueError("optimize_fleet needs finite station capacities")
    total_cap = float(caps.sum())
    if total_cap <= 0:
        raise InfeasibleError("stations have no room")
    g_lo = ensemble.solve_gamma(net.spec, net.theta, 1)
    target = STATION_FILL * total_cap
    h = lambda lg: _station_mean(net, math.exp(lg)) - target
    hi = math.log(g_lo) + 1.0
    while h(hi) < 0:
        hi += 1.0
    g_hi = math.exp(brentq(h, math.log(g_lo), hi, xtol=1e-12))
    if g_hi <= g_lo:
        g_hi = g_lo * (1.0 + 1e-9)
    edges = np.linspace(math.log(g_lo), math.log(g_hi), seeds + 1)
    obj = lambda lg: failure_rate(net, math.exp(lg))
    best_lg, best_val = None, math.inf
    for a, b in zip(edges[:-1], edges[1:]):
        lg, val = _golden(obj, float(a), float(b), tol)
        for cand, cval in ((float(a), obj(float(a))), (lg, val)):
            if cval < best_val or (cval == best_val and cand < best_lg):
                best_lg, best_val = cand, cval
    end = float(edges[-1])
    if obj(end) < best_val:
        best_lg = end
    return sizing_report(net, math.exp(best_lg))


# ---------------------------------------------------------------------------
# rerouting matrices
# ---------------------------------------------------------------------------

W_FAMILIES = ("q-rows", "identity", "convex", "permutation")


def _is_reversible_q(Q, nu, tol=1e-12) -> bool:
    return check_reversibility(Q, nu, tol)


def rerouting_solutions(Q, nu, j: int, family: str = "q-rows", weight: float = 0.5,
                        mapping: Optional[Mapping[int, int]] = None) -> np.ndarray:
    """A rerouting matrix ``W`` for riders who find station ``j`` full.

    ``W[i, k]`` is the probability that a rider coming from ``i`` is sent on
    to ``k``; row and column ``j`` are zero. ``family`` selects the
    destination-row solution, the identity (send riders back), a convex mix
    ``weight * q-rows + (1 - weight) * identity`` or a one-to-one ``mapping``.
    """
    Q = np.asarray(Q, dtype=float)
    nu = np.asarray(nu, dtype=float)
    J1 = Q.shape[0]
    others = np.array([k for k in range(J1) if k != j])
    W = np.zeros((J1, J1))
    if family == "q-rows":
        W[np.ix_(others, others)] = Q[j, others][None, :]
        return W
    if family in ("identity", "convex"):
        if not _is_reversible_q(Q, nu):
            raise JacksonError("identity is not a solution: Q is not reversible")
        ident = np.zeros((J1, J1))
        ident[others, others] = 1.0
        if family == "identity":
            return ident
        if not 0.0 <= weight <= 1.0:
            raise ValueError("convex weight must lie in [0, 1]")
        return weight * rerouting_solutions(Q, nu, j, "q-rows") + (1.0 - weight) * ident
    if family == "permutation":
        if mapping is None:
            mapping = {int(i): int(others[(k + 1) % len(others)]) for k, i in enumerate(others)}
        targets = [mapping[int(i)] for i in others]
        if sorted(targets) != sorted(others.tolist()):
            raise ValueError("mapping must be one-to-one on the other stations")
        for i in others:
            W[i, mapping[int(i)]] = 1.0
        return W
    raise ValueError(f"unknown rerouting family {family!r}; choose from {W_FAMILIES}")


def validate_w(Q, nu, j: int, W) -> float:
    """``max_{k != j} |nu_j q_jk - sum_{i != j} nu_i q_ij w_ik|``."""
    Q = np.asarray(Q, dtype=float)
    nu = np.asarray(nu, dtype=float)
    W = np.asarray(W, dtype=float)
    J1 = Q.shape[0]
    others = np.array([k for k in range(J1) if k != j])
    lhs = nu[j] * Q[j, others]
    rhs = (nu[others] * Q[others, j]) @ W[np.ix_(others, others)]
    return float(np.max(np.abs(lhs - rhs))) if len(others) else 0.0


def _check_w(Q, nu, j, W):
    J1 = Q.shape[0]
    W = np.asarray(W, dtype=float)
    if W.shape != (J1, J1):
        raise ValueError(f"W for station {j} must be {J1} x {J1}")
    if np.any(W < 0):
        raise ValueError(f"W for station {j} has negative entries")
    senders = [i for i in range(J1) if i != j and Q[i, j] > 0]
    for i in senders:
        if abs(W[i].sum() - 1.0) > W_TOL:
            raise ValueError(f"W for station {j}: row {i} not stochastic")
    if np.any(W[:, j] > 0) or np.any(W[j] > 0):
        raise ValueError(f"W for station {j} must not involve station {j}")
    bad = [(i, k) for i in senders for k in np.flatnonzero(W[i] > 0) if Q[j, k] <= 0]
    if bad:
        raise ValueError(f"W for station {j} uses a missing route {j}->{bad[0][1]}")
    res = validate_w(Q, nu, j, W)
    if res > W_TOL:
        raise ValueError(f"W for station {j} violates the invariance equations (residual {res:.3g})")
    return W


def build_rerouting_provider(net: BikeNetwork, W: Sequence[np.ndarray]) -> dynamics.StateDependentProvider:
    """State-dependent routing on the detailed network that never overflows a station.

    A rider on route ``i -> j`` finding ``j`` full continues on ``j -> k``
    with probability ``W[j][i, k]``; otherwise routing is the detailed one.
    """
    if net.bike.variant != "detailed":
        raise ValueError("rerouting provider needs the detailed network")
    Q, nu = net.bike.Q, net.nu
    J1 = net.bike.stations
    Ws = [_check_w(Q, nu, j, W[j]) for j in range(J1)]
    idx = net.route_index()
    base = net.spec.dense_routing()
    N = net.spec.size
    caps = net.spec.capacities

    def fn(m):
        full = tuple(int(j) for j in range(J1) if m[j] >= caps[j])
        return _rows_for(full)

    cache: dict = {}

    def _rows_for(full):
        if full in cache:
            return cache[full]
        P = base.copy()
        for j in full:
            for i in range(J1):
                if Q[i, j] <= 0:
                    continue
                row = np.zeros(N)
                for k in np.flatnonzero(Ws[j][i] > 0):
                    row[idx[(j, int(k))]] = Ws[j][i, k]
                P[idx[(i, j)]] = row
        cache[full] = P
        return P

    return dynamics.StateDependentProvider(caps, fn)


# ---------------------------------------------------------------------------
# regime diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegimeReport:
    gamma: float
    M: float
    station_ratio: float  # min r_j / max r_j over stations
    route_criterion: float  # max route r / (sqrt(J1) max station r)
    capacity_bound: float  # largest station capacity
    rate_bounds: tuple  # (min, max) over all service rates
    route_mass: float  # max nu_i q_ij times the number of routes
    population_scale: float  # M / J2^2
    gamma_over_M: float
    flags: tuple
    verdict: str

    def as_dict(self) -> dict:
        out = dict(self.__dict__)
        out["rate_bounds"] = list(self.rate_bounds)
        out["flags"] = list(self.flags)
        return out


def regime_diagnostics(net: BikeNetwork, M: Optional[float] = None, delta: Optional[float] = None,
                          kappa: Optional[float] = None, ratio_flag: float = 0.1, route_flag: float = 1.0,
                          mass_flag: float = 10.0, scale_flag: float = 0.1) -> RegimeReport:
    """Finite-size readings of the asymptotic-independence hypotheses.

    Exactly one of ``M`` (population), ``delta`` (empty-probability target,
    infinite capacities) or ``kappa`` (``gamma = kappa * N``) fixes the
    operating point.
    """
    if sum(x is not None for x in (M, delta, kappa)) != 1:
        raise ValueError("give exactly one of M, delta, kappa")
    if delta is not None:
        fs = fleet_from_delta(net, delta)
        gamma, M = fs.gamma, fs.M_real
    elif kappa is not None:
        gamma = kappa * net.spec.size
        M = ensemble.mean_total(net.spec, net.theta, gamma)
    else:
        gamma = ensemble.solve_gamma(net.spec, net.theta, M)
    r = net.utilizations
    st, rt = net.stations, net.route_nodes
    station_ratio = float(r[st].min() / r[st].max())
    route_crit = float(r[rt].max() / (math.sqrt(len(st)) * r[st].max())) if len(rt) else 0.0
    caps = net.bike.capacities
    cap_bound = float(caps.max())
    rates = net.spec.rates
    if net.bike.variant == "detailed":
        Q = net.bike.Q
        J2 = len(net.routes)
        route_mass = float((net.nu[:, None] * Q).max() * J2)
    else:
        J2 = 1
        route_mass = float(net.nu.max() * J2)
    scale = float(M / J2**2)
    flags = []
    if station_ratio < ratio_flag:
        flags.append(f"station utilization ratio {station_ratio:.3g} far from 1")
    if route_crit > route_flag:
        flags.append(f"route utilization criterion {route_crit:.3g} not small")
    if route_mass > mass_flag:
        flags.append(f"route mass {route_mass:.3g} not bounded")
    bounded = math.isfinite(cap_bound)
    if bounded and route_mass <= mass_flag and M >= 1 and scale <= scale_flag:
        verdict = "bounded-capacity truncated-geometric regime"
    elif not bounded and not flags:
        verdict = "infinite-capacity geometric regime"
    else:
        verdict = "outside the asymptotic regimes"
    return RegimeReport(float(gamma), float(M), station_ratio, route_crit, cap_bound,
                        (float(rates.min()), float(rates.max())), route_mass, scale,
                        float(gamma / M) if M else math.inf, tuple(flags), verdict)
