"""Exact solvers for the discrete label-guessing loss and its LP relaxation.

These enumerate assignments and are meant as test oracles at brute-force
scale (at most ``ORACLE_BOUND`` candidates). The binary solver is the
exception: it runs in ``O(n log n)`` by sorting.

The combined objective of an assignment ``t`` is::

    -(alpha / n) * sum_j log F[t_j, j] + (1 - alpha) * d(count(t) / n, z)

The indicator divergence is a hard constraint (``count(t) = n z``) for every
``alpha``; for soft divergences a zero weight cancels an infinite term.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .losses import Divergence, PredictionMatrix, TransportPlan, divergence
from .numerics import check_simplex, safe_log

ORACLE_BOUND = 10**7
_CHUNK = 1 << 16


def integral_counts(z, n, tol=1e-9):
    """Return ``n z`` as integers, or ``None`` if it is not integral."""
    nz = n * np.asarray(z, dtype=np.float64)
    counts = np.rint(nz)
    if np.any(np.abs(nz - counts) > tol):
        return None
    return counts.astype(np.int64)


def _weighted(weight, x):
    with np.errstate(invalid="ignore"):
        return np.where(weight == 0, 0.0, weight * x)


def _objective(alpha, n, nll, counts, z, d, target):
    like = _weighted(alpha / n, nll)
    if d is Divergence.INDICATOR:
        pen = np.where(np.all(counts == target, axis=-1), 0.0, np.inf)
        return like + pen
    return like + _weighted(1.0 - alpha, divergence(counts / n, z, d))


def _sentinel(n):
    return np.full(n, -1, dtype=np.int64)


def comb_loss_exact(F: PredictionMatrix, z, alpha, d):
    """Minimize the combined objective over all ``K**n`` assignments.

    Returns the minimum and the lexicographically smallest minimizer.
    With the indicator divergence and non-integral ``n z`` no assignment is
    feasible: the loss is ``+inf`` and the assignment is all ``-1``.
    """
    d = Divergence(d)
    logf = F.log_values
    K, n = logf.shape
    z = check_simplex(z, K)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    total = K**n
    if total > ORACLE_BOUND:
        raise ValueError("oracle bound exceeded")
    target = None
    if d is Divergence.INDICATOR:
        target = integral_counts(z, n)
        if target is None:
            warnings.warn("n * z is not integral: no assignment meets the indicator constraint",
                          stacklevel=2)
            return math.inf, _sentinel(n)

    place = K ** np.arange(n - 1, -1, -1, dtype=np.int64)
    cols = np.arange(n)
    classes = np.arange(K)
    best_val, best_t = math.inf, None
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        t = (idx[:, None] // place) % K
        nll = -logf[t, cols].sum(axis=1)
        counts = (t[:, :, None] == classes).sum(axis=1)
        obj = _objective(alpha, n, nll, counts, z, d, target)
        i = int(np.argmin(obj))
        if obj[i] < best_val:
            best_val, best_t = float(obj[i]), t[i].copy()
    if best_t is None:
        return math.inf, _sentinel(n)
    return best_val, best_t


def comb_loss_binary(F: PredictionMatrix, z, alpha, d):
    """Two-class combined loss by sorting, ``O(n log n)``.

    For a fixed number ``k`` of class-1 guesses the likelihood term is
    minimized by the ``k`` columns with the largest class-1 versus class-0
    log-odds, so it suffices to sort once and scan ``k = 0..n`` with prefix
    sums.
    """
    d = Divergence(d)
    logf = F.log_values
    K, n = logf.shape
    if K != 2:
        raise ValueError(f"binary solver needs K = 2, got K = {K}")
    z = check_simplex(z, K)
    target = None
    if d is Divergence.INDICATOR:
        target = integral_counts(z, n)
        if target is None:
            warnings.warn("n * z is not integral: no assignment meets the indicator constraint",
                          stacklevel=2)
            return math.inf, _sentinel(n)

    order = np.argsort(-(logf[1] - logf[0]), kind="stable")
    switch = (logf[0] - logf[1])[order]
    nll = -logf[0].sum() + np.concatenate([[0.0], np.cumsum(switch)])
    k = np.arange(n + 1)
    counts = np.stack([n - k, k], axis=1)
    obj = _objective(alpha, n, nll, counts, z, d, target)
    best = int(np.argmin(obj))
    t = np.zeros(n, dtype=np.int64)
    t[order[:best]] = 1
    return float(obj[best]), t


def _multiset_assignments(counts):
    """Yield assignments with the given class counts in lexicographic order."""
    counts = list(int(c) for c in counts)
    n = sum(counts)
    t = [0] * n

    def rec(pos):
        if pos == n:
            yield tuple(t)
            return
        for c, left in enumerate(counts):
            if left:
                counts[c] -= 1
                t[pos] = c
                yield from rec(pos + 1)
                counts[c] += 1

    yield from rec(0)


def relax_lp_loss_exact(F: PredictionMatrix, z):
    """Exact transport LP ``min (1/n) trace(C^T U)`` s.t. ``U 1 = n z``.

    Solved over the integral vertices of the transportation polytope, i.e.
    all assignments whose class counts equal ``n z``. Returns the optimum
    and its 0/1 plan (lexicographically smallest optimal assignment).
    """
    logf = F.log_values
    K, n = logf.shape
    z = check_simplex(z, K)
    target = integral_counts(z, n)
    if target is None:
        raise ValueError("infeasible marginals")
    size = math.factorial(n)
    for c in target:
        size //= math.factorial(int(c))
    if size > ORACLE_BOUND:
        raise ValueError("oracle bound exceeded")

    cost = -logf
    cols = np.arange(n)
    best_val, best_t = math.inf, None
    gen = _multiset_assignments(target)
    while True:
        chunk = [t for _, t in zip(range(_CHUNK), gen)]
        if not chunk:
            break
        t = np.asarray(chunk, dtype=np.int64)
        vals = cost[t, cols].sum(axis=1) / n
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_t = float(vals[i]), t[i]
    plan = np.zeros((K, n))
    plan[best_t, cols] = 1.0
    return best_val, TransportPlan(safe_log(plan))


def assignment_plan(t, K):
    """One-hot ``K x n`` matrix of an assignment."""
    t = np.asarray(t, dtype=np.int64)
    plan = np.zeros((K, t.shape[0]))
    plan[t, np.arange(t.shape[0])] = 1.0
    return plan
