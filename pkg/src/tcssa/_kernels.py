"""Hot per-patch loops: Top-k selection and sparse slot scatter/gather.

Each kernel has a numba version and a numpy version with identical results.
Set ``TCSSA_DISABLE_NUMBA=1`` to force the numpy path (also used when numba
is not importable).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("TCSSA_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def topk_numpy(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    # stable sort on the negated row keeps the lower index first on ties
    idx = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return idx.astype(np.int64), np.take_along_axis(probs, idx, axis=1)


def scatter_slots_numpy(x, idx, w, item, n_items, n_slots):
    """Per item and slot: weighted feature sum and weight sum."""
    n, k = idx.shape
    flat = (item[:, None] * n_slots + idx).ravel()
    num = np.zeros((n_items * n_slots, x.shape[1]))
    den = np.bincount(flat, weights=w.ravel(), minlength=n_items * n_slots)
    np.add.at(num, flat, np.repeat(x, k, axis=0) * w.ravel()[:, None])
    return num.reshape(n_items, n_slots, -1), den.reshape(n_items, n_slots)


def gather_pooling_grad_numpy(x, idx, item, dc, c, s):
    """d loss / d truncated weight for every selected (patch, slot) pair.

    For c = num / s:  dw_jk = dc_k . (x_j - c_k) / s_k
    """
    dck = dc[item[:, None], idx]
    ck = c[item[:, None], idx]
    sk = s[item[:, None], idx]
    return np.einsum("nkd,nkd->nk", dck, x[:, None, :] - ck) / sk


if numba is not None:

    @numba.njit(cache=True)
    def topk_numba(probs, k):
        n, m = probs.shape
        idx = np.empty((n, k), dtype=np.int64)
        val = np.empty((n, k), dtype=np.float64)
        for j in range(n):
            # insertion into a k-long sorted buffer; strict > keeps lower index on ties
            filled = 0
            for s in range(m):
                p = probs[j, s]
                if filled == k and not (p > val[j, k - 1]):
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and p > val[j, pos - 1]:
                    if pos < k:
                        val[j, pos] = val[j, pos - 1]
                        idx[j, pos] = idx[j, pos - 1]
                    pos -= 1
                val[j, pos] = p
                idx[j, pos] = s
                if filled < k:
                    filled += 1
        return idx, val

    @numba.njit(cache=True)
    def scatter_slots_numba(x, idx, w, item, n_items, n_slots):
        n, k = idx.shape
        d = x.shape[1]
        num = np.zeros((n_items, n_slots, d))
        den = np.zeros((n_items, n_slots))
        for j in range(n):
            b = item[j]
            for r in range(k):
                s = idx[j, r]
                wj = w[j, r]
                den[b, s] += wj
                for t in range(d):
                    num[b, s, t] += wj * x[j, t]
        return num, den

    @numba.njit(cache=True)
    def gather_pooling_grad_numba(x, idx, item, dc, c, s):
        n, k = idx.shape
        d = x.shape[1]
        out = np.empty((n, k))
        for j in range(n):
            b = item[j]
            for r in range(k):
                sl = idx[j, r]
                acc = 0.0
                for t in range(d):
                    acc += dc[b, sl, t] * (x[j, t] - c[b, sl, t])
                out[j, r] = acc / s[b, sl]
        return out


def topk(probs, k):
    if USE_NUMBA:
        return topk_numba(probs, k)
    return topk_numpy(probs, k)


def scatter_slots(x, idx, w, item, n_items, n_slots):
    if USE_NUMBA:
        return scatter_slots_numba(x, idx, w, item, n_items, n_slots)
    return scatter_slots_numpy(x, idx, w, item, n_items, n_slots)


def gather_pooling_grad(x, idx, item, dc, c, s):
    if USE_NUMBA:
        return gather_pooling_grad_numba(x, idx, item, dc, c, s)
    return gather_pooling_grad_numpy(x, idx, item, dc, c, s)
