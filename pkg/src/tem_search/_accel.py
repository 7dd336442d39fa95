"""Hot inner loops, compiled with numba when available.

Set ``TEM_SEARCH_DISABLE_NUMBA=1`` to force the pure-numpy fallbacks. The
scatter and rank kernels give bitwise identical results on both paths; the
softmax kernel agrees to rounding (exp implementations differ).
"""
import os

import numpy as np

_DISABLED = os.environ.get("TEM_SEARCH_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def _scatter_add_rows_np(out, ids, values):
    np.add.at(out, ids, values)
    return out


def _masked_softmax_np(x, mask):
    # x, mask: (n, m); mask rows have >=1 live entry
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0).astype(x.dtype)
    return e / e.sum(axis=1, keepdims=True)


def _relevant_ranks_np(scores, relevant):
    # 1-based rank of each relevant id; ties broken by id ascending
    ranks = np.empty(relevant.shape[0], dtype=np.int64)
    ids = np.arange(scores.shape[0])
    for j, r in enumerate(relevant):
        s = scores[r]
        ranks[j] = 1 + np.count_nonzero(scores > s) + np.count_nonzero((scores == s) & (ids < r))
    return ranks


if HAS_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_nb(out, ids, values):
        n, d = values.shape
        for r in range(n):
            row = ids[r]
            for c in range(d):
                out[row, c] += values[r, c]
        return out

    @njit(cache=True)
    def _masked_softmax_nb(x, mask):
        n, m = x.shape
        out = np.zeros_like(x)
        for r in range(n):
            mx = -np.inf
            for c in range(m):
                if mask[r, c] and x[r, c] > mx:
                    mx = x[r, c]
            total = 0.0
            for c in range(m):
                if mask[r, c]:
                    e = np.exp(x[r, c] - mx)
                    out[r, c] = e
                    total += e
            for c in range(m):
                out[r, c] = out[r, c] / total
        return out

    @njit(cache=True)
    def _relevant_ranks_nb(scores, relevant):
        ranks = np.empty(relevant.shape[0], dtype=np.int64)
        for j in range(relevant.shape[0]):
            r = relevant[j]
            s = scores[r]
            above = 0
            for i in range(scores.shape[0]):
                v = scores[i]
                if v > s or (v == s and i < r):
                    above += 1
            ranks[j] = above + 1
        return ranks


def scatter_add_rows(out, ids, values):
    """Accumulate ``values[r]`` into ``out[ids[r]]`` in index order."""
    ids = np.ascontiguousarray(ids, dtype=np.int64).ravel()
    values = np.ascontiguousarray(values, dtype=out.dtype).reshape(ids.shape[0], -1)
    if HAS_NUMBA:
        return _scatter_add_rows_nb(out, ids, values)
    return _scatter_add_rows_np(out, ids, values)


def masked_softmax(x, mask):
    """Row softmax of a 2-D array restricted to ``mask``; masked entries are 0."""
    if HAS_NUMBA:
        return _masked_softmax_nb(np.ascontiguousarray(x), np.ascontiguousarray(mask))
    return _masked_softmax_np(x, mask)


def relevant_ranks(scores, relevant):
    """1-based ranks of ``relevant`` ids when sorting ``scores`` descending, id ascending."""
    scores = np.ascontiguousarray(scores)
    relevant = np.ascontiguousarray(relevant, dtype=np.int64)
    if HAS_NUMBA:
        return _relevant_ranks_nb(scores, relevant)
    return _relevant_ranks_np(scores, relevant)
