"""Markov dynamics of closed networks under capacity policies.

Covers transition kernels (standard, blocking, blocking with rerouting and
general state-dependent routing), exact stationary solves on enumerated
state spaces, product-form evaluation, balance-equation residuals and a
seeded next-jump simulator.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve
from scipy.special import gammaln

from . import _simcore
from .errors import AbsorbingStateError, InfeasibleError, JacksonError, ProductFormError, StateSpaceTooLarge
from .netmodel import NetworkSpec, NodeKind, Policy, check_reversibility

DEFAULT_STATE_CAP = 2_000_000
PROVIDER_TOL = 1e-12


def state_cap() -> int:
    return int(os.environ.get("JACKSON_STATE_CAP", DEFAULT_STATE_CAP))


# ---------------------------------------------------------------------------
# state space
# ---------------------------------------------------------------------------


def _int_caps(capacities, M: int) -> list[int]:
    return [M if not math.isfinite(c) else int(min(c, M)) for c in capacities]


def count_states(capacities, M: int) -> int:
    """Number of vectors ``0 <= n_j <= c_j`` summing to ``M``."""
    ways = np.zeros(M + 1, dtype=object)
    ways[0] = 1
    for c in _int_caps(capacities, M):
        new = np.zeros(M + 1, dtype=object)
        for m in range(M + 1):
            if ways[m]:
                new[m : min(M, m + c) + 1] += ways[m]
        ways = new
    return int(ways[M])


def bounded_compositions(capacities, M: int) -> np.ndarray:
    """All bounded compositions of ``M`` in lexicographic order."""
    caps = _int_caps(capacities, M)
    N = len(caps)
    suffix_cap = np.concatenate([np.cumsum(caps[::-1])[::-1], [0]])
    out = []
    cur = [0] * N

    def rec(k, left):
        if k == N - 1:
            if left <= caps[k]:
                cur[k] = left
                out.append(tuple(cur))
            return
        lo = max(0, left - int(suffix_cap[k + 1]))
        for v in range(lo, min(caps[k], left) + 1):
            cur[k] = v
            rec(k + 1, left - v)

    if N:
        rec(0, M)
    return np.array(out, dtype=np.int64).reshape(-1, N)


def enumerate_states(spec: NetworkSpec, M: Optional[int] = None, cap: Optional[int] = None) -> np.ndarray:
    """Lexicographically ordered state space ``S^c_{N,M}`` as an array of rows."""
    M = spec.customers if M is None else int(M)
    cap = state_cap() if cap is None else cap
    count = count_states(spec.capacities, M)
    if count == 0:
        raise InfeasibleError("state space empty: total capacity below population")
    if count > cap:
        raise StateSpaceTooLarge(f"state space too large for exact solve ({count} > {cap})")
    return bounded_compositions(spec.capacities, M)


# ---------------------------------------------------------------------------
# first-entrance probabilities and routing providers
# ---------------------------------------------------------------------------


def first_entrance_probs(P, i: int, A: Sequence[int]) -> np.ndarray:
    """Law of the first point of ``A`` hit by the ``P``-chain started at ``i``.

    The first step always counts, so ``A`` may contain ``i``. Returns a
    length-N vector supported on ``A``.
    """
    P = P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float)
    N = P.shape[0]
    A = np.asarray(sorted(set(int(a) for a in A)), dtype=int)
    if len(A) == 0:
        raise ValueError("target set must be nonempty")
    T = np.setdiff1d(np.arange(N), A)
    out = np.zeros(N)
    out[A] = P[i, A]
    if len(T):
        lhs = np.eye(len(T)) - P[np.ix_(T, T)]
        try:
            h = np.linalg.solve(lhs, P[np.ix_(T, A)])
        except np.linalg.LinAlgError as exc:
            raise JacksonError("singular transient system: target set not reachable") from exc
        out[A] += P[i, T] @ h
    return out


class StateDependentProvider:
    """Routing matrices ``P(m)`` indexed by configurations of ``M - 1`` customers.

    ``fn(m)`` returns an N x N array; only rows and columns in
    ``active(m) = {j : m_j < c_j}`` are used.
    """

    def __init__(self, capacities, fn: Callable[[tuple], np.ndarray]):
        self.capacities = np.asarray(capacities, dtype=float)
        self.fn = fn

    def active(self, m) -> np.ndarray:
        return np.flatnonzero(np.asarray(m) < self.capacities)

    def __call__(self, m) -> np.ndarray:
        return np.asarray(self.fn(tuple(int(x) for x in m)), dtype=float)


def rerouting_provider(P, capacities) -> StateDependentProvider:
    """Blocking-and-rerouting as a provider: rows are first-entrance laws into ``A(m)``."""
    P = P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float)
    caps = np.asarray(capacities, dtype=float)

    @lru_cache(maxsize=None)
    def for_active(active: tuple) -> np.ndarray:
        out = np.zeros_like(P)
        for i in active:
            out[i] = first_entrance_probs(P, i, active)
        return out

    def fn(m):
        return for_active(tuple(np.flatnonzero(np.asarray(m) < caps).tolist()))

    return StateDependentProvider(caps, fn)


def verify_provider(theta, provider: StateDependentProvider, m, tol: float = PROVIDER_TOL) -> bool:
    """Check that ``theta`` restricted to ``A(m)`` is invariant for ``P(m)``."""
    theta = np.asarray(theta, dtype=float)
    A = provider.active(m)
    Pm = provider(m)
    sub = Pm[np.ix_(A, A)]
    if np.any(sub < -tol):
        return False
    if np.any(np.abs(sub.sum(axis=1) - 1.0) > tol):
        return False
    return bool(np.all(np.abs(theta[A] @ sub - theta[A]) <= tol))


# ---------------------------------------------------------------------------
# transition kernels
# ---------------------------------------------------------------------------


def _departure(spec: NetworkSpec, i: int, n: int) -> float:
    return spec.nodes[i].departure_rate(n)


class Dynamics:
    """Transition structure of a network; rerouting laws are memoised by saturation pattern."""

    def __init__(self, spec: NetworkSpec, theta=None):
        self.spec = spec
        self.P = spec.dense_routing()
        self.caps = spec.capacities
        if spec.policy is Policy.BLOCKING:
            if theta is None or not check_reversibility(self.P, theta):
                raise ProductFormError("product form not guaranteed: non-reversible routing")
        if spec.policy is Policy.STATE_DEPENDENT and spec.provider is None:
            raise JacksonError("state-dependent policy requires a provider")
        self._reroute = lru_cache(maxsize=None)(self._reroute_row)

    def _reroute_row(self, i: int, full: frozenset) -> np.ndarray:
        A = [j for j in range(self.spec.size) if j == i or j not in full]
        return first_entrance_probs(self.P, i, A)

    def routing_row(self, state, i: int) -> np.ndarray:
        """Probabilities that a customer leaving ``i`` settles at each node."""
        n = np.asarray(state)
        policy = self.spec.policy
        N = self.spec.size
        if policy is Policy.STANDARD:
            return self.P[i]
        if policy is Policy.BLOCKING:
            row = self.P[i] * (n < self.caps)
            row = row.copy()
            row[i] = 0.0
            row[i] = 1.0 - row.sum()
            return row
        if policy is Policy.BLOCKING_REROUTING:
            full = frozenset(j for j in range(N) if j != i and n[j] >= self.caps[j])
            if not full:
                return self.P[i]
            return self._reroute(i, full)
        m = n.copy()
        m[i] -= 1
        row = self.spec.provider(m)[i].copy()
        row[(n >= self.caps) & (np.arange(N) != i)] = 0.0
        return row

    def kernel(self, state) -> list[tuple[tuple, float]]:
        n = np.asarray(state, dtype=np.int64)
        out = []
        for i in range(self.spec.size):
            g = _departure(self.spec, i, int(n[i]))
            if g <= 0:
                continue
            row = self.routing_row(n, i)
            for j in np.flatnonzero(row > 0):
                if j == i:
                    continue
                tgt = n.copy()
                tgt[i] -= 1
                tgt[j] += 1
                out.append((tuple(int(x) for x in tgt), g * float(row[j])))
        return out


def kernel(spec: NetworkSpec, theta, state) -> list[tuple[tuple, float]]:
    """Outgoing ``(target state, rate)`` pairs; self-transitions are omitted."""
    return Dynamics(spec, theta).kernel(state)


# ---------------------------------------------------------------------------
# product form and exact stationary solve
# ---------------------------------------------------------------------------


def log_weights(spec: NetworkSpec, theta, states: np.ndarray) -> np.ndarray:
    """Unnormalised log product-form weights ``sum_j log(theta_j^n / g_j!(n))``."""
    theta = np.asarray(theta, dtype=float)
    mu = spec.rates
    inf_srv = spec.infinite_server
    states = np.asarray(states, dtype=float)
    lw = states @ (np.log(theta) - np.log(mu))
    if inf_srv.any():
        lw -= gammaln(states[:, inf_srv] + 1).sum(axis=1)
    return lw


def product_form(spec: NetworkSpec, theta, states: Optional[np.ndarray] = None) -> np.ndarray:
    states = enumerate_states(spec) if states is None else states
    lw = log_weights(spec, theta, states)
    w = np.exp(lw - lw.max())
    return w / w.sum()


@dataclass(frozen=True)
class StationaryLaw:
    states: np.ndarray
    probs: np.ndarray
    residual: float

    def node_marginals(self) -> list[np.ndarray]:
        out = []
        top = int(self.states.max()) if self.states.size else 0
        for j in range(self.states.shape[1]):
            out.append(np.bincount(self.states[:, j], weights=self.probs, minlength=top + 1))
        return out

    def node_means(self) -> np.ndarray:
        return self.probs @ self.states


def generator(spec: NetworkSpec, theta, states: np.ndarray) -> sp.csr_matrix:
    dyn = Dynamics(spec, theta)
    index = {tuple(int(x) for x in s): k for k, s in enumerate(states)}
    rows, cols, vals = [], [], []
    for k, s in enumerate(states):
        for tgt, rate in dyn.kernel(s):
            rows.append(k)
            cols.append(index[tgt])
            vals.append(rate)
    S = len(states)
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(S, S))
    out = np.asarray(Q.sum(axis=1)).ravel()
    return (Q - sp.diags(out)).tocsr()


def exact_stationary(spec: NetworkSpec, theta=None) -> StationaryLaw:
    """Stationary law of the CTMC by a sparse direct solve of ``pi Q = 0``."""
    states = enumerate_states(spec)
    S = len(states)
    if S == 1:
        return StationaryLaw(states, np.ones(1), 0.0)
    Q = generator(spec, theta, states)
    off = Q - sp.diags(Q.diagonal())
    n_comp, _ = connected_components(off, directed=True, connection="strong")
    if n_comp != 1:
        raise JacksonError("state space not irreducible under these dynamics")
    A = Q.T.tolil()
    A[S - 1, :] = np.ones(S)
    b = np.zeros(S)
    b[S - 1] = 1.0
    A = A.tocsc()
    pi = spsolve(A, b)
    pi = pi + spsolve(A, b - A @ pi)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.max(np.abs(Q.T @ pi)))
    return StationaryLaw(states, pi, residual)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def balance_residual(spec: NetworkSpec, theta, provider: Optional[StateDependentProvider] = None) -> float:
    """Largest violation of the global balance equations under the product form."""
    provider = spec.provider if provider is None else provider
    theta = np.asarray(theta, dtype=float)
    caps = spec.capacities
    N = spec.size
    states = enumerate_states(spec)
    worst = 0.0
    for n in states:
        lhs = rhs = 0.0
        for i in range(N):
            if n[i] == 0:
                continue
            m = n.copy()
            m[i] -= 1
            Pm = provider(m)
            gi = _departure(spec, i, int(n[i]))
            for j in range(N):
                if j == i or n[j] >= caps[j]:
                    continue
                lhs += gi * Pm[i, j]
                gj = _departure(spec, j, int(n[j]) + 1)
                ratio = theta[j] * gi / (theta[i] * gj)
                rhs += gj * Pm[j, i] * ratio
        worst = max(worst, abs(lhs - rhs))
    return worst


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

_POLICY_CODE = {
    Policy.STANDARD: 0,
    Policy.BLOCKING: 1,
    Policy.BLOCKING_REROUTING: 2,
    Policy.STATE_DEPENDENT: 3,
}
MAX_PROVIDER_TABLE = 20_000_000


@dataclass(frozen=True)
class SimulationResult:
    """Time-weighted occupancy statistics with batch-means standard errors."""

    mean: np.ndarray
    mean_se: np.ndarray
    empty: np.ndarray
    empty_se: np.ndarray
    full: np.ndarray
    full_se: np.ndarray
    hist: np.ndarray
    hist_se: np.ndarray
    blocked_rate: np.ndarray
    blocked_rate_se: np.ndarray
    total_time: float
    events: int
    null_events: int
    replicas: int
    batch_empty: np.ndarray  # (replicas * batches, N) time fraction empty per batch
    batch_blocked: np.ndarray  # (replicas * batches, N) blocked attempts per unit time per batch


def greedy_fill(capacities, M: int) -> np.ndarray:
    n = np.zeros(len(capacities), dtype=np.int64)
    left = M
    for j, c in enumerate(capacities):
        take = left if not math.isfinite(c) else min(left, int(c))
        n[j] = take
        left -= take
        if left == 0:
            break
    if left:
        raise InfeasibleError("population exceeds total capacity")
    return n


def _routing_arrays(spec: NetworkSpec):
    P = sp.csr_matrix(spec.routing, dtype=float)
    P.sort_indices()
    P.eliminate_zeros()
    cum = np.empty_like(P.data)
    for i in range(P.shape[0]):
        lo, hi = P.indptr[i], P.indptr[i + 1]
        if hi > lo:
            c = np.cumsum(P.data[lo:hi])
            c /= c[-1]
            c[-1] = 1.0
            cum[lo:hi] = c
    return P.indptr.astype(np.int64), P.indices.astype(np.int64), cum


def _provider_table(spec: NetworkSpec):
    N, M = spec.size, spec.customers
    base = max(M, 1)
    size = base**N
    if size * N * N > MAX_PROVIDER_TABLE:
        raise StateSpaceTooLarge("state-dependent routing too large to tabulate for simulation")
    table = np.ones((size, N, N))
    for m in bounded_compositions(spec.capacities, M - 1):
        idx = int(sum(int(m[k]) * base**k for k in range(N)))
        Pm = spec.provider(m)
        c = np.cumsum(Pm, axis=1)
        c[:, -1] = np.maximum(c[:, -1], 1.0)
        table[idx] = c
    return table, base


def _batch_stats(acc: np.ndarray, durations: np.ndarray):
    """Overall ratio estimate and batch-means standard error along axis 0."""
    est = acc.sum(axis=0) / durations.sum()
    per = acc / durations.reshape((-1,) + (1,) * (acc.ndim - 1))
    B = acc.shape[0]
    se = per.std(axis=0, ddof=1) / math.sqrt(B) if B > 1 else np.full_like(est, np.nan)
    return est, se


def _simulate_once(spec, rng, n_events, burn_in, batches, hist_levels, initial):
    N = spec.size
    kind = np.array([0 if nd.kind is NodeKind.SINGLE else 1 for nd in spec.nodes], dtype=np.int64)
    mu = spec.rates
    cap = np.array([_simcore.BIG_CAP if not math.isfinite(c) else int(c) for c in spec.capacities], dtype=np.int64)
    policy = _POLICY_CODE[spec.policy]
    if policy == 3:
        table, base = _provider_table(spec)
        indptr = np.zeros(N + 1, dtype=np.int64)
        indices = np.zeros(1, dtype=np.int64)
        cum = np.ones(1)
    else:
        table, base = np.ones((1, 1, 1)), 1
        indptr, indices, cum = _routing_arrays(spec)
    n = np.array(initial, dtype=np.int64)
    acc_mean = np.zeros((batches, N))
    acc_empty = np.zeros((batches, N))
    acc_full = np.zeros((batches, N))
    acc_hist = np.zeros((batches, N, hist_levels))
    blocked = np.zeros((batches, N))
    durations = np.zeros(batches)
    status, nulls = _simcore.run(rng, n, kind, mu, cap, indptr, indices, cum, policy, table, base,
                                 n_events, burn_in, acc_mean, acc_empty, acc_full, acc_hist, blocked, durations)
    if status < 0:
        raise AbsorbingStateError("no enabled transition: absorbing state reached")
    return acc_mean, acc_empty, acc_full, acc_hist, blocked, durations, nulls


def simulate(spec: NetworkSpec, theta=None, horizon_events: int = 1_000_000, seed: int = 0,
             replicas: int = 1, burn_in: Optional[int] = None, batches: int = 20,
             hist_levels: Optional[int] = None, initial=None) -> SimulationResult:
    """Seeded continuous-time jump simulation of the network.

    Each replica draws from its own PCG64 stream spawned from ``seed``.
    ``hist_levels`` bounds the occupancy histogram (default ``M + 1`` for
    networks of at most 64 nodes, otherwise no histogram).
    """
    M = spec.customers
    N = spec.size
    if spec.policy is Policy.BLOCKING and (theta is None or not check_reversibility(spec.routing, theta)):
        raise ProductFormError("product form not guaranteed: non-reversible routing")
    if hist_levels is None:
        hist_levels = M + 1 if N <= 64 else 0
    if M == 0:
        z = np.zeros(N)
        hist = np.zeros((N, hist_levels))
        if hist_levels:
            hist[:, 0] = 1.0
        return SimulationResult(z, z, np.ones(N), z, (spec.capacities == 0).astype(float), z,
                                hist, np.zeros_like(hist), z, z, math.inf, 0, 0, replicas,
                                np.ones((1, N)), np.zeros((1, N)))
    if horizon_events < batches:
        raise ValueError("need at least one event per batch")
    burn_in = horizon_events // 20 if burn_in is None else burn_in
    init = greedy_fill(spec.capacities, M) if initial is None else np.asarray(initial)
    seqs = np.random.SeedSequence(seed).spawn(replicas)
    parts = []
    for ss in seqs:
        rng = np.random.Generator(np.random.PCG64(ss))
        parts.append(_simulate_once(spec, rng, horizon_events, burn_in, batches, hist_levels, init))
    fields = {"mean": [], "empty": [], "full": [], "hist": [], "blocked_rate": []}
    ses = {k: [] for k in fields}
    total_time = 0.0
    nulls = 0
    batch_empty, batch_blocked = [], []
    for acc_mean, acc_empty, acc_full, acc_hist, blocked, durations, nl in parts:
        for key, acc in (("mean", acc_mean), ("empty", acc_empty), ("full", acc_full),
                         ("hist", acc_hist), ("blocked_rate", blocked)):
            est, se = _batch_stats(acc, durations)
            fields[key].append(est)
            ses[key].append(se)
        total_time += float(durations.sum())
        nulls += nl
        batch_empty.append(acc_empty / durations[:, None])
        batch_blocked.append(blocked / durations[:, None])
    R = len(parts)
    pooled = {k: np.mean(v, axis=0) for k, v in fields.items()}
    pooled_se = {k: np.sqrt(np.sum(np.square(v), axis=0)) / R for k, v in ses.items()}
    return SimulationResult(
        pooled["mean"], pooled_se["mean"], pooled["empty"], pooled_se["empty"],
        pooled["full"], pooled_se["full"], pooled["hist"], pooled_se["hist"],
        pooled["blocked_rate"], pooled_se["blocked_rate"],
        total_time, horizon_events * R, nulls, R,
        np.vstack(batch_empty), np.vstack(batch_blocked),
    )
