"""Closed Jackson network description, routing checks and invariant vectors."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .errors import NotIrreducibleError

INF = math.inf
ROW_SUM_TOL = 1e-12
INVARIANT_TOL = 1e-12


class NodeKind(enum.Enum):
    SINGLE = "single"
    INFINITE = "infinite"


class Policy(enum.Enum):
    STANDARD = "standard"
    BLOCKING = "blocking"
    BLOCKING_REROUTING = "blocking-rerouting"
    STATE_DEPENDENT = "state-dependent"


@dataclass(frozen=True)
class NodeSpec:
    """A service station.

    ``rate`` is the exponential service parameter. A single-server node
    departs at ``rate`` whenever busy, an infinite-server node at
    ``rate * n``. ``capacity`` is an int or ``math.inf``.
    """

    kind: NodeKind
    rate: float
    capacity: float = INF

    @property
    def finite(self) -> bool:
        return math.isfinite(self.capacity)

    def departure_rate(self, n: int) -> float:
        if n <= 0:
            return 0.0
        if self.kind is NodeKind.SINGLE:
            return self.rate
        return self.rate * n


def single(rate: float, capacity: float = INF) -> NodeSpec:
    return NodeSpec(NodeKind.SINGLE, float(rate), capacity)


def infinite(rate: float) -> NodeSpec:
    return NodeSpec(NodeKind.INFINITE, float(rate), INF)


@dataclass(frozen=True)
class NetworkSpec:
    """Closed network: nodes, routing matrix, population and dynamics.

    ``routing`` may be a dense array or a scipy sparse matrix.
    ``provider`` is only used with ``Policy.STATE_DEPENDENT``.
    """

    nodes: tuple
    routing: Any
    customers: int = 0
    policy: Policy = Policy.STANDARD
    provider: Optional[Any] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if not sp.issparse(self.routing):
            object.__setattr__(self, "routing", np.asarray(self.routing, dtype=float))

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def rates(self) -> np.ndarray:
        return np.array([nd.rate for nd in self.nodes], dtype=float)

    @property
    def capacities(self) -> np.ndarray:
        return np.array([nd.capacity for nd in self.nodes], dtype=float)

    @property
    def infinite_server(self) -> np.ndarray:
        return np.array([nd.kind is NodeKind.INFINITE for nd in self.nodes])

    def dense_routing(self) -> np.ndarray:
        if sp.issparse(self.routing):
            return self.routing.toarray()
        return self.routing

    def with_customers(self, customers: int) -> "NetworkSpec":
        return NetworkSpec(self.nodes, self.routing, int(customers), self.policy, self.provider)

    def with_policy(self, policy: Policy, provider=None) -> "NetworkSpec":
        return NetworkSpec(self.nodes, self.routing, self.customers, policy, provider)


@dataclass(frozen=True)
class InvariantVector:
    theta: np.ndarray
    residual: float

    def __array__(self, dtype=None, copy=None):
        return self.theta if dtype is None else self.theta.astype(dtype)

    def __len__(self):
        return len(self.theta)


def _csr(P) -> sp.csr_matrix:
    return sp.csr_matrix(P, dtype=float)


def is_irreducible(P) -> bool:
    P = _csr(P)
    if P.shape[0] == 1:
        return True
    support = P.copy()
    support.data = (support.data > 0).astype(float)
    support.eliminate_zeros()
    n_comp, _ = connected_components(support, directed=True, connection="strong")
    return n_comp == 1


def validate_network(spec: NetworkSpec) -> list[str]:
    """Return the list of violated network invariants (empty when valid)."""
    problems = []
    n = spec.size
    if n == 0:
        return ["network has no nodes"]
    for idx, nd in enumerate(spec.nodes):
        if not nd.rate > 0:
            problems.append(f"node {idx}: service rate must be positive (got {nd.rate})")
        if nd.kind is NodeKind.INFINITE and nd.finite:
            problems.append(f"node {idx}: infinite-server node must have infinite capacity")
        if nd.finite and (nd.capacity < 0 or nd.capacity != int(nd.capacity)):
            problems.append(f"node {idx}: capacity must be a nonnegative integer or inf")
    P = _csr(spec.routing)
    if P.shape != (n, n):
        problems.append(f"routing shape {P.shape} does not match {n} nodes")
        return problems
    if P.nnz and P.data.min() < 0:
        problems.append("routing has negative entries")
    sums = np.asarray(P.sum(axis=1)).ravel()
    for i, s in enumerate(sums):
        if abs(s - 1.0) > ROW_SUM_TOL:
            problems.append(f"row {i} not stochastic (sums to {s:.15g})")
    if not is_irreducible(P):
        problems.append("routing not irreducible")
    if spec.customers < 0:
        problems.append("customer count must be nonnegative")
    caps = spec.capacities
    if np.all(np.isfinite(caps)) and caps.sum() < spec.customers:
        problems.append(f"M exceeds total capacity ({spec.customers} > {int(caps.sum())})")
    if spec.policy is Policy.STANDARD and np.any(np.isfinite(caps)):
        problems.append("standard policy requires all capacities infinite")
    if spec.policy is Policy.STATE_DEPENDENT and spec.provider is None:
        problems.append("state-dependent policy requires a routing provider")
    return problems


def _power_iteration(P: sp.csr_matrix, tol: float = 1e-15, max_iter: int = 1_000_000) -> np.ndarray:
    # lazy chain removes periodicity
    n = P.shape[0]
    lazy = (P + sp.identity(n, format="csr")) * 0.5
    x = np.full(n, 1.0 / n)
    lt = lazy.T.tocsr()
    for _ in range(max_iter):
        y = lt @ x
        y /= y.sum()
        if np.max(np.abs(y - x)) < tol:
            return y
        x = y
    return x


def invariant_vector(P) -> InvariantVector:
    """Invariant probability vector of an irreducible stochastic matrix.

    Solves ``(P^T - I) x = 0`` with one equation replaced by ``sum(x) = 1``.
    """
    P = _csr(P)
    n = P.shape[0]
    if not is_irreducible(P):
        raise NotIrreducibleError("routing not irreducible")
    if n == 1:
        return InvariantVector(np.ones(1), 0.0)
    A = (P.T - sp.identity(n, format="csr")).tolil()
    A[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[n - 1] = 1.0
    A = A.tocsc()
    theta = spsolve(A, b)
    theta = np.asarray(theta, dtype=float)

    def resid(x):
        return float(np.max(np.abs(P.T @ x - x)))

    # one step of iterative refinement
    r = b - A @ theta
    if np.max(np.abs(r)) > 0:
        theta = theta + spsolve(A, r)
    if not np.all(np.isfinite(theta)) or theta.min() <= 0 or resid(theta) > INVARIANT_TOL:
        theta = _power_iteration(P)
    theta = theta / theta.sum()
    return InvariantVector(theta, resid(theta))


def check_reversibility(P, theta, tol: float = 1e-12) -> bool:
    """True iff ``theta_i p_ij == theta_j p_ji`` for every pair, within ``tol``."""
    theta = np.asarray(theta, dtype=float)
    P = _csr(P)
    flow = sp.diags(theta) @ P
    diff = (flow - flow.T).tocsr()
    if diff.nnz == 0:
        return True
    return bool(np.max(np.abs(diff.data)) <= tol)


def utilizations(theta, spec: NetworkSpec, normalize: bool = False) -> np.ndarray:
    """Node utilizations ``theta_j / mu_j``.

    With ``normalize=True`` the vector is rescaled so that the largest
    single-server utilization equals one.
    """
    r = np.asarray(theta, dtype=float) / spec.rates
    if normalize:
        singles = ~spec.infinite_server
        scale = r[singles].max() if singles.any() else r.max()
        r = r / scale
    return r


def routing_from_triplets(n: int, triplets: Sequence[Sequence[float]]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i, j, p in triplets:
        rows.append(int(i))
        cols.append(int(j))
        vals.append(float(p))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
