"""Shared random-network generators for the test suite."""

import itertools
import math

import numpy as np
import pytest

from jacksonnet import NetworkSpec, Policy, infinite, single
from jacksonnet import dynamics
from jacksonnet.netmodel import is_irreducible


def random_irreducible(rng, n, density=0.6):
    """Random stochastic matrix with a Hamiltonian cycle inside its support."""
    while True:
        W = rng.uniform(0.1, 1.0, (n, n)) * (rng.random((n, n)) < density)
        perm = rng.permutation(n)
        for a, b in zip(perm, np.roll(perm, -1)):
            W[a, b] = max(W[a, b], rng.uniform(0.1, 1.0))
        if n == 1:
            W[0, 0] = 1.0
        P = W / W.sum(axis=1, keepdims=True)
        if is_irreducible(P):
            return P


def random_reversible(rng, n):
    """Reversible chain from symmetric edge weights on a connected graph."""
    while True:
        S = rng.uniform(0.1, 1.0, (n, n)) * (rng.random((n, n)) < 0.7)
        S = np.triu(S, 1)
        for k in range(n - 1):
            S[k, k + 1] = max(S[k, k + 1], rng.uniform(0.1, 1.0))
        S = S + S.T + np.diag(rng.uniform(0.0, 0.5, n) * (rng.random(n) < 0.5))
        if n == 1:
            S[0, 0] = 1.0
        P = S / S.sum(axis=1, keepdims=True)
        if is_irreducible(P):
            return P


def random_nodes(rng, n, finite: bool, M: int):
    """Mixed single-server / infinite-server nodes; finite capacities keep room for ``M``."""
    while True:
        nodes = []
        for _ in range(n):
            rate = float(rng.uniform(0.5, 2.0))
            if rng.random() < 0.3:
                nodes.append(infinite(rate))
            elif finite and rng.random() < 0.75:
                nodes.append(single(rate, int(rng.integers(1, 4))))
            else:
                nodes.append(single(rate))
        caps = [nd.capacity for nd in nodes]
        if sum(caps) >= M:
            return nodes


def time_reversal(P, theta):
    return (P.T * theta[None, :]) / theta[:, None]


def mixed_provider(P, theta, caps):
    """State-dependent routing: an m-dependent mix of two theta-compatible rerouting laws."""
    forward = dynamics.rerouting_provider(P, caps)
    backward = dynamics.rerouting_provider(time_reversal(P, theta), caps)

    def fn(m):
        lam = ((7 * sum((k + 1) * v for k, v in enumerate(m))) % 5) / 4.0
        return lam * forward(m) + (1.0 - lam) * backward(m)

    return dynamics.StateDependentProvider(caps, fn)


POLICIES = (Policy.STANDARD, Policy.BLOCKING, Policy.BLOCKING_REROUTING, Policy.STATE_DEPENDENT)


def random_instance(rng, policy):
    """One random small network for the product-form check, with its invariant vector."""
    from jacksonnet import invariant_vector

    n = int(rng.integers(2, 5))
    M = int(rng.integers(1, 7))
    if policy is Policy.BLOCKING:
        P = random_reversible(rng, n)
    else:
        P = random_irreducible(rng, n)
    nodes = random_nodes(rng, n, finite=policy is not Policy.STANDARD, M=M)
    theta = invariant_vector(P).theta
    provider = None
    if policy is Policy.STATE_DEPENDENT:
        provider = mixed_provider(P, theta, np.array([nd.capacity for nd in nodes]))
    return NetworkSpec(nodes, P, M, policy, provider), theta


def instances(policy, count, seed):
    rng = np.random.default_rng(seed)
    return [random_instance(rng, policy) for _ in range(count)]


def product_form_oracle(spec, theta):
    """Normalised product-form weights by direct products over an independent enumeration."""
    caps = [spec.customers if not math.isfinite(c) else int(c) for c in spec.capacities]
    states, weights = [], []
    for n in itertools.product(*(range(c + 1) for c in caps)):
        if sum(n) != spec.customers:
            continue
        w = 1.0
        for j, nj in enumerate(n):
            for k in range(1, nj + 1):
                w *= theta[j] / spec.nodes[j].departure_rate(k)
        states.append(n)
        weights.append(w)
    w = np.array(weights)
    return {s: p for s, p in zip(states, w / w.sum())}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict = {}


def record_acceptance(number: int, ok: bool, detail: str):
    _ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
