"""Hot numeric kernels: numba-jitted fast paths with pure-numpy fallbacks.

Every kernel exists twice, as a ``_numba`` and a ``_numpy`` implementation
with identical contracts. The module-level names dispatch to the numba
variant when it is available and to numpy otherwise. Set the environment
variable ``DISTILRET_NO_NUMBA=1`` before import to force the numpy path
(useful for debugging and for the benchmark in benchmarks/bench_kernels.py).

Scores and gradients accumulate in float64 regardless of storage dtype so
that results do not depend on how work is split across shards or threads.
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("DISTILRET_NO_NUMBA", "").strip() not in ("", "0")

if _FORCE_NUMPY:
    NUMBA_ENABLED = False
else:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False


def topk_dot_numpy(rows: np.ndarray, query: np.ndarray, k: int):
    """Exact top-k rows by inner product with ``query``.

    Returns (indices, scores) sorted by descending score, ties broken by
    ascending row index. ``rows`` may be float32; accumulation is float64.
    """
    scores = rows.astype(np.float64, copy=False) @ query.astype(np.float64, copy=False)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))[:k]
    return order.astype(np.int64), scores[order]


def scatter_add_numpy(table: np.ndarray, ids: np.ndarray, vec: np.ndarray) -> None:
    """table[i] += vec for every i in ids, duplicates accumulating."""
    np.add.at(table, ids, vec)


def bag_mean_numpy(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Mean of the table rows selected by ids, accumulated in float64."""
    return table[ids].mean(axis=0, dtype=np.float64)


def adam_step_numpy(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> None:
    """One in-place bias-corrected Adam update on a flat parameter array."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def bag_mean_batch_numpy(table: np.ndarray, flat_ids: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-bag mean of table rows; bag i is flat_ids[offsets[i]:offsets[i+1]].

    Bags must be non-empty. Returns float64 (n_bags, d).
    """
    gathered = table[flat_ids].astype(np.float64, copy=False)
    sums = np.add.reduceat(gathered, offsets[:-1], axis=0)
    return sums / np.diff(offsets)[:, None]


def scatter_mean_bags_numpy(
    table: np.ndarray, flat_ids: np.ndarray, offsets: np.ndarray, bag_grads: np.ndarray
) -> None:
    """table[t] += bag_grads[i] / len(bag i) for every token t of bag i.

    Contributions are grouped by row (sort + reduceat) so the update is one
    vectorized add per distinct row instead of a buffered np.add.at, which
    is an order of magnitude slower at training batch sizes.
    """
    counts = np.diff(offsets)
    contrib = np.repeat(bag_grads / counts[:, None], counts, axis=0)
    order = np.argsort(flat_ids, kind="stable")
    sorted_ids = flat_ids[order]
    boundaries = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    sums = np.add.reduceat(contrib[order], boundaries, axis=0)
    table[sorted_ids[boundaries]] += sums


if NUMBA_ENABLED:

    @njit(cache=True, nogil=True)
    def topk_dot_numba(rows, query, k):
        n, d = rows.shape
        out_idx = np.empty(k, np.int64)
        out_scr = np.empty(k, np.float64)
        size = 0
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += rows[i, j] * query[j]
            if size < k:
                pos = size
                while pos > 0 and out_scr[pos - 1] < s:
                    out_scr[pos] = out_scr[pos - 1]
                    out_idx[pos] = out_idx[pos - 1]
                    pos -= 1
                out_scr[pos] = s
                out_idx[pos] = i
                size += 1
            elif s > out_scr[k - 1]:
                pos = k - 1
                while pos > 0 and out_scr[pos - 1] < s:
                    out_scr[pos] = out_scr[pos - 1]
                    out_idx[pos] = out_idx[pos - 1]
                    pos -= 1
                out_scr[pos] = s
                out_idx[pos] = i
        return out_idx, out_scr

    @njit(cache=True, nogil=True)
    def scatter_add_numba(table, ids, vec):
        for i in range(ids.shape[0]):
            row = ids[i]
            for j in range(vec.shape[0]):
                table[row, j] += vec[j]

    @njit(cache=True, nogil=True)
    def bag_mean_numba(table, ids):
        n = ids.shape[0]
        d = table.shape[1]
        out = np.zeros(d, np.float64)
        for i in range(n):
            row = ids[i]
            for j in range(d):
                out[j] += table[row, j]
        for j in range(d):
            out[j] /= n
        return out

    @njit(cache=True, nogil=True)
    def adam_step_numba(param, grad, m, v, lr, beta1, beta2, eps, t):
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(param.shape[0]):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            param[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)

    @njit(cache=True, nogil=True)
    def bag_mean_batch_numba(table, flat_ids, offsets):
        n_bags = offsets.shape[0] - 1
        d = table.shape[1]
        out = np.zeros((n_bags, d), np.float64)
        for i in range(n_bags):
            lo, hi = offsets[i], offsets[i + 1]
            for t in range(lo, hi):
                row = flat_ids[t]
                for j in range(d):
                    out[i, j] += table[row, j]
            inv = 1.0 / (hi - lo)
            for j in range(d):
                out[i, j] *= inv
        return out

    @njit(cache=True, nogil=True)
    def scatter_mean_bags_numba(table, flat_ids, offsets, bag_grads):
        n_bags = offsets.shape[0] - 1
        d = table.shape[1]
        for i in range(n_bags):
            lo, hi = offsets[i], offsets[i + 1]
            inv = 1.0 / (hi - lo)
            for t in range(lo, hi):
                row = flat_ids[t]
                for j in range(d):
                    table[row, j] += bag_grads[i, j] * inv

    topk_dot = topk_dot_numba
    scatter_add = scatter_add_numba
    bag_mean = bag_mean_numba
    adam_step = adam_step_numba
    bag_mean_batch = bag_mean_batch_numba
    scatter_mean_bags = scatter_mean_bags_numba
else:
    topk_dot = topk_dot_numpy
    scatter_add = scatter_add_numpy
    bag_mean = bag_mean_numpy
    adam_step = adam_step_numpy
    bag_mean_batch = bag_mean_batch_numpy
    scatter_mean_bags = scatter_mean_bags_numpy
