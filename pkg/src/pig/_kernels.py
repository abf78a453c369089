"""Hot inner loops, compiled with numba when available.

Each kernel has a pure-numpy twin. ``PIG_NUMBA=0`` in the environment selects
the numpy path (also used automatically when numba cannot be imported). Both
paths must agree to floating-point rounding; ``tests/test_kernels.py`` checks
this and ``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = HAVE_NUMBA and os.environ.get("PIG_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# midranks (DeLong structural components)


def midrank_numpy(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = xs.shape[0]
    # run boundaries of tied values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    ranks_sorted = np.repeat(0.5 * (starts + ends - 1) + 1.0, ends - starts)
    out = np.empty(n)
    out[order] = ranks_sorted
    return out


@njit(cache=True)
def _midrank_jit(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    out = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j < n and x[order[j]] == x[order[i]]:
            j += 1
        r = 0.5 * (i + j - 1) + 1.0
        for k in range(i, j):
            out[order[k]] = r
        i = j
    return out


def midrank_numba(x: np.ndarray) -> np.ndarray:
    return _midrank_jit(np.ascontiguousarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# bounded perturbation network: ReLU hidden layers, output bound * tanh(.)


def policy_param_count(n_in: int, hidden: tuple[int, ...]) -> int:
    sizes = (n_in, *hidden, 1)
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


def policy_forward_numpy(X: np.ndarray, theta: np.ndarray, sizes: np.ndarray, bound: float) -> np.ndarray:
    h = np.asarray(X, dtype=np.float64)
    pos = 0
    n_layers = len(sizes) - 1
    for layer in range(n_layers):
        a, b = int(sizes[layer]), int(sizes[layer + 1])
        W = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        c = theta[pos:pos + b]
        pos += b
        h = h @ W + c
        if layer < n_layers - 1:
            np.maximum(h, 0.0, out=h)
    return bound * np.tanh(h[:, 0])


@njit(cache=True)
def _policy_forward_jit(X, theta, sizes, bound):
    n = X.shape[0]
    n_layers = sizes.shape[0] - 1
    width = 0
    for s in sizes:
        if s > width:
            width = s
    out = np.empty(n)
    cur = np.empty(width)
    nxt = np.empty(width)
    for r in range(n):
        for i in range(sizes[0]):
            cur[i] = X[r, i]
        pos = 0
        for layer in range(n_layers):
            a = sizes[layer]
            b = sizes[layer + 1]
            for j in range(b):
                nxt[j] = theta[pos + a * b + j]
            for i in range(a):
                v = cur[i]
                if v != 0.0:
                    base = pos + i * b
                    for j in range(b):
                        nxt[j] += v * theta[base + j]
            pos += a * b + b
            if layer < n_layers - 1:
                for j in range(b):
                    cur[j] = nxt[j] if nxt[j] > 0.0 else 0.0
            else:
                out[r] = bound * np.tanh(nxt[0])
    return out


def policy_forward_numba(X, theta, sizes, bound):
    return _policy_forward_jit(np.ascontiguousarray(X, dtype=np.float64),
                               np.ascontiguousarray(theta, dtype=np.float64),
                               np.asarray(sizes, dtype=np.int64), float(bound))


# ---------------------------------------------------------------------------
# per-group count / sum / sum of squares (one-way ANOVA)


def group_moments_numpy(values: np.ndarray, groups: np.ndarray, k: int):
    counts = np.bincount(groups, minlength=k).astype(np.float64)
    sums = np.bincount(groups, weights=values, minlength=k)
    sumsq = np.bincount(groups, weights=values * values, minlength=k)
    return counts, sums, sumsq


@njit(cache=True)
def _group_moments_jit(values, groups, k):
    counts = np.zeros(k)
    sums = np.zeros(k)
    sumsq = np.zeros(k)
    for i in range(values.shape[0]):
        g = groups[i]
        v = values[i]
        counts[g] += 1.0
        sums[g] += v
        sumsq[g] += v * v
    return counts, sums, sumsq


def group_moments_numba(values, groups, k):
    return _group_moments_jit(np.ascontiguousarray(values, dtype=np.float64),
                              np.ascontiguousarray(groups, dtype=np.int64), int(k))


# ---------------------------------------------------------------------------
# best squared-error split along one sorted feature


def best_split_numpy(xs: np.ndarray, ys: np.ndarray, min_leaf: int):
    """Return ``(sse_reduction, threshold)`` for the best split of presorted ``xs``."""
    n = xs.shape[0]
    if n < 2 * min_leaf:
        return 0.0, np.nan
    csum = np.cumsum(ys)
    total = csum[-1]
    left_n = np.arange(1, n, dtype=np.float64)
    left_s = csum[:-1]
    right_s = total - left_s
    gain = left_s ** 2 / left_n + right_s ** 2 / (n - left_n) - total ** 2 / n
    valid = (xs[1:] > xs[:-1]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
    if not valid.any():
        return 0.0, np.nan
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))
    return float(gain[i]), 0.5 * (xs[i] + xs[i + 1])


@njit(cache=True)
def _best_split_jit(xs, ys, min_leaf):
    n = xs.shape[0]
    if n < 2 * min_leaf:
        return 0.0, np.nan
    total = 0.0
    for i in range(n):
        total += ys[i]
    best = -np.inf
    thr = np.nan
    left = 0.0
    for i in range(n - 1):
        left += ys[i]
        nl = i + 1
        nr = n - nl
        if nl < min_leaf or nr < min_leaf or not xs[i + 1] > xs[i]:
            continue
        right = total - left
        g = left * left / nl + right * right / nr - total * total / n
        if g > best:
            best = g
            thr = 0.5 * (xs[i] + xs[i + 1])
    if best == -np.inf:
        return 0.0, np.nan
    return best, thr


def best_split_numba(xs, ys, min_leaf):
    g, t = _best_split_jit(np.ascontiguousarray(xs, dtype=np.float64),
                           np.ascontiguousarray(ys, dtype=np.float64), int(min_leaf))
    return float(g), float(t)


if USE_NUMBA:
    midrank = midrank_numba
    policy_forward = policy_forward_numba
    group_moments = group_moments_numba
    best_split = best_split_numba
else:
    midrank = midrank_numpy
    policy_forward = policy_forward_numpy
    group_moments = group_moments_numpy
    best_split = best_split_numpy
