"""Equal-size point set matching by the epsilon-scaling auction algorithm.

Persons are source points, objects are target points, benefit is the negated
Euclidean distance. Unassigned persons bid one at a time (Gauss-Seidel
variant) for their best object, raising its price by the gap to their second
best plus ``eps``. With final tolerance ``eps`` the assignment is within
``n * eps`` of the optimal total cost, so ``eps`` is chosen relative to a
lower bound on the mean cost.

Large sets may restrict bidding to each point's nearest candidates (a sparse
auction). If the sparse graph stalls, the phase is redone densely.
"""
from __future__ import annotations

import logging

import numba
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)


class SizeMismatch(ValueError):
    pass


@numba.njit(cache=True)
def _dense_phase(benefit, prices, eps, assign, owner, max_bids):
    n = benefit.shape[0]
    stack = np.empty(n, dtype=np.int64)
    top = 0
    for i in range(n - 1, -1, -1):
        if assign[i] < 0:
            stack[top] = i
            top += 1
    bids = 0
    while top > 0 and bids < max_bids:
        top -= 1
        i = stack[top]
        best = -1
        v1 = -np.inf
        v2 = -np.inf
        for j in range(n):
            v = benefit[i, j] - prices[j]
            if v > v1:
                v2 = v1
                v1 = v
                best = j
            elif v > v2:
                v2 = v
        prices[best] += v1 - v2 + eps
        prev = owner[best]
        owner[best] = i
        assign[i] = best
        if prev >= 0:
            assign[prev] = -1
            stack[top] = prev
            top += 1
        bids += 1
    return top


@numba.njit(cache=True)
def _sparse_phase(indptr, indices, values, prices, eps, assign, owner, max_bids, gap_floor):
    n = assign.shape[0]
    stack = np.empty(n, dtype=np.int64)
    top = 0
    for i in range(n - 1, -1, -1):
        if assign[i] < 0:
            stack[top] = i
            top += 1
    bids = 0
    while top > 0 and bids < max_bids:
        top -= 1
        i = stack[top]
        best = -1
        v1 = -np.inf
        v2 = -np.inf
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            v = values[k] - prices[j]
            if v > v1:
                v2 = v1
                v1 = v
                best = j
            elif v > v2:
                v2 = v
        gap = v1 - v2 if v2 > -np.inf else gap_floor
        prices[best] += gap + eps
        prev = owner[best]
        owner[best] = i
        assign[i] = best
        if prev >= 0:
            assign[prev] = -1
            stack[top] = prev
            top += 1
        bids += 1
    return top


def _eps_schedule(spread, lower_bound, rel_tol, abs_tol, scale_factor, start=None):
    floor = abs_tol if abs_tol is not None else 1e-9 * max(spread, 1e-300)
    eps_final = max(rel_tol * lower_bound / 2.0, floor)
    eps = max(start if start is not None else spread / 4.0, eps_final)
    out = [eps]
    while eps > eps_final:
        eps = max(eps / scale_factor, eps_final)
        out.append(eps)
    return out


def auction_assignment(cost, rel_tol=0.01, abs_tol=None, scale_factor=5.0, max_bids=None):
    """Minimum-cost perfect assignment of rows to columns of a square matrix.

    Returns ``assignment`` with ``assignment[i]`` the column given to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise SizeMismatch(f"cost matrix must be square, got {cost.shape}")
    if n <= 1:
        return np.zeros(n, dtype=np.int64)
    benefit = np.ascontiguousarray(-cost)
    spread = float(cost.max() - cost.min())
    schedule = _eps_schedule(spread, float(cost.min(axis=1).mean()), rel_tol, abs_tol, scale_factor)
    prices = np.zeros(n)
    max_bids = max_bids or 1000 * n
    for eps in schedule:
        assign = np.full(n, -1, dtype=np.int64)
        owner = np.full(n, -1, dtype=np.int64)
        left = _dense_phase(benefit, prices, eps, assign, owner, max_bids)
        if left:
            log.warning("auction stopped with %d unassigned at eps=%.3g; completing greedily", left, eps)
            _greedy_complete(cost, assign, owner)
            break
    return assign


def _greedy_complete(cost, assign, owner):
    free = list(np.flatnonzero(owner < 0))
    for person in np.flatnonzero(assign < 0):
        k = int(np.argmin(cost[person, free]))
        assign[person] = free.pop(k)
        owner[assign[person]] = person


def sparse_auction(source, target, k=32, rel_tol=0.01, abs_tol=None, scale_factor=5.0):
    """Auction restricted to a symmetric k-nearest-neighbour candidate graph.

    Each source bids only on its ``k`` nearest targets plus any target that
    counts it among its own ``k`` nearest sources. Phases that stall (the
    candidate graph lacks a perfect matching at current prices) are rerun on
    the dense cost matrix.
    """
    n = len(source)
    k = min(k, n)
    d_st, i_st = cKDTree(target).query(source, k=k)
    d_ts, i_ts = cKDTree(source).query(target, k=k)
    rows = np.concatenate([np.repeat(np.arange(n), k), i_ts.ravel()])
    cols = np.concatenate([i_st.ravel(), np.repeat(np.arange(n), k)])
    pairs = np.unique(rows * n + cols)
    rows, cols = pairs // n, pairs % n
    values = -np.linalg.norm(source[rows] - target[cols], axis=1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    spread = float(-values.min())
    schedule = _eps_schedule(spread, float(d_st[:, 0].mean()), rel_tol, abs_tol, scale_factor,
                             start=max(spread / 4.0, 1e-12))
    prices = np.zeros(n)
    dense = None
    for eps in schedule:
        assign = np.full(n, -1, dtype=np.int64)
        owner = np.full(n, -1, dtype=np.int64)
        left = _sparse_phase(indptr, cols, values, prices, eps, assign, owner, 200 * n, spread)
        if left:
            if dense is None:
                dense = -cdist(source, target)
            left = _dense_phase(dense, prices, eps, assign, owner, 1000 * n)
            if left:
                _greedy_complete(-dense, assign, owner)
                break
    return assign


def emd_assignment(source, target, sparse_threshold=1024, k=32, **kw):
    """Auction matching between two equal-size point sets (Euclidean cost).

    Returns the assignment (``target[assignment[i]]`` is matched to
    ``source[i]``) and the mean matched distance.
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(source) != len(target):
        raise SizeMismatch(f"EMD needs equal set sizes, got {len(source)} and {len(target)}")
    if len(source) == 0:
        raise SizeMismatch("EMD of empty sets is undefined")
    if len(source) > sparse_threshold:
        assign = sparse_auction(source, target, k=k, **kw)
    else:
        assign = auction_assignment(cdist(source, target), **kw)
    cost = float(np.linalg.norm(source - target[assign], axis=1).mean())
    return assign, cost
