"""Compiled next-jump simulation loop for closed networks.

Policies: 0 standard, 1 blocking, 2 blocking with rerouting, 3 tabulated
state-dependent routing. Occupancy statistics are accumulated lazily per
node so an event costs O(log N) regardless of the network size.
"""

import numpy as np
from numba import njit

BIG_CAP = np.int64(1) << np.int64(62)


@njit(cache=True, nogil=True)
def _rate(kind, mu, n):
    if n <= 0:
        return 0.0
    if kind == 0:
        return mu
    return mu * n


@njit(cache=True, nogil=True)
def _tree_set(tree, leaves, i, value):
    pos = leaves + i
    tree[pos] = value
    pos //= 2
    while pos >= 1:
        tree[pos] = tree[2 * pos] + tree[2 * pos + 1]
        pos //= 2


@njit(cache=True, nogil=True)
def _tree_sample(tree, leaves, rng):
    while True:
        u = rng.random() * tree[1]
        pos = 1
        while pos < leaves:
            left = 2 * pos
            if u < tree[left]:
                pos = left
            else:
                u -= tree[left]
                pos = left + 1
        if tree[pos] > 0.0:
            return pos - leaves


@njit(cache=True, nogil=True)
def _route(indptr, indices, cum, i, rng):
    lo = indptr[i]
    hi = indptr[i + 1] - 1
    u = rng.random()
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return indices[lo]


@njit(cache=True, nogil=True)
def _flush(i, t, n, cap, last, b, acc_mean, acc_empty, acc_full, acc_hist):
    dt = t - last[i]
    if dt > 0.0:
        ni = n[i]
        acc_mean[b, i] += ni * dt
        if ni == 0:
            acc_empty[b, i] += dt
        if ni == cap[i]:
            acc_full[b, i] += dt
        if ni < acc_hist.shape[2]:
            acc_hist[b, i, ni] += dt
    last[i] = t


@njit(cache=True, nogil=True)
def run(rng, n, kind, mu, cap, indptr, indices, cum, policy, sd_table, sd_base,
        n_events, burn_in, acc_mean, acc_empty, acc_full, acc_hist, blocked, durations):
    """Simulate ``burn_in + n_events`` jumps; returns (status, null events)."""
    N = n.shape[0]
    leaves = 1
    while leaves < N:
        leaves *= 2
    tree = np.zeros(2 * leaves)
    for i in range(N):
        _tree_set(tree, leaves, i, _rate(kind[i], mu[i], n[i]))
    n_batches = durations.shape[0]
    per_batch = n_events // n_batches
    last = np.zeros(N)
    t = 0.0
    t_batch = 0.0
    b = 0
    nulls = 0
    total = burn_in + n_events
    for e in range(total):
        recording = e >= burn_in
        if e == burn_in:
            t = 0.0
            t_batch = 0.0
            for k in range(N):
                last[k] = 0.0
        R = tree[1]
        if R <= 0.0:
            return -1, nulls
        t += rng.exponential(1.0 / R)
        i = _tree_sample(tree, leaves, rng)
        if policy == 3:
            idx = 0
            mult = 1
            for k in range(N):
                mk = n[k] - 1 if k == i else n[k]
                idx += mk * mult
                mult *= sd_base
            u = rng.random()
            j = N - 1
            for k in range(N):
                if sd_table[idx, i, k] > u:
                    j = k
                    break
            if j != i and n[j] >= cap[j]:
                j = i
        else:
            j = _route(indptr, indices, cum, i, rng)
            if j != i and n[j] >= cap[j]:
                if recording:
                    blocked[b, j] += 1
                if policy == 1:
                    j = i
                elif policy == 2:
                    cur = j
                    while True:
                        cur = _route(indptr, indices, cum, cur, rng)
                        if cur == i or n[cur] < cap[cur]:
                            break
                    j = cur
        if j == i:
            nulls += 1
        else:
            if recording:
                _flush(i, t, n, cap, last, b, acc_mean, acc_empty, acc_full, acc_hist)
                _flush(j, t, n, cap, last, b, acc_mean, acc_empty, acc_full, acc_hist)
            n[i] -= 1
            n[j] += 1
            _tree_set(tree, leaves, i, _rate(kind[i], mu[i], n[i]))
            _tree_set(tree, leaves, j, _rate(kind[j], mu[j], n[j]))
        if recording:
            done = e - burn_in + 1
            if (done % per_batch == 0 and b < n_batches - 1) or done == n_events:
                for k in range(N):
                    _flush(k, t, n, cap, last, b, acc_mean, acc_empty, acc_full, acc_hist)
                durations[b] = t - t_batch
                t_batch = t
                b += 1
    return 0, nulls
