"""Hot loops: multi-head MLP forward/backward and exact top-k selection.

Each kernel has a numba implementation and a pure-numpy implementation with
the same signature. ``CURA_DISABLE_NUMBA=1`` (or numba being unavailable)
selects the numpy path at import time. Both paths are importable directly by
name so tests and benchmarks can compare them.

Shapes used throughout: X (B, D), W1 (M, D, H), b1 (M, H), W2 (M, H),
b2 (M,), dropout mask (M, B, H) or an empty (0, 0, 0) array for none.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_DISABLED = os.environ.get("CURA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")
USE_NUMBA = numba is not None and not NUMBA_DISABLED

NO_MASK = np.zeros((0, 0, 0))


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


# ---------------------------------------------------------------------------
# multi-head MLP


def heads_forward_numpy(X, W1, b1, W2, b2, mask):
    """Return raw sigmoid outputs (M, B) and hidden activations (M, B, H).

    Hidden activations are post-ReLU and post-dropout, which is all the
    backward pass needs.
    """
    A = np.matmul(X, W1)
    A += b1[:, None, :]
    np.maximum(A, 0.0, out=A)
    if mask.size:
        A *= mask
    logits = np.matmul(A, W2[:, :, None])[..., 0]
    logits += b2[:, None]
    return 1.0 / (1.0 + np.exp(-logits)), A


def heads_backward_numpy(X, A, mask, W2, dlogit):
    """Parameter gradients given d(loss)/d(logit) of shape (M, B)."""
    gW2 = np.matmul(dlogit[:, None, :], A)[:, 0, :]
    gb2 = dlogit.sum(axis=1)
    dZ = dlogit[:, :, None] * W2[:, None, :]
    # A > 0 exactly where the unit was active and kept by dropout
    dZ *= A > 0.0
    if mask.size:
        dZ *= mask
    gW1 = np.matmul(X.T, dZ)
    gb1 = dZ.sum(axis=1)
    return gW1, gb1, gW2, gb2


def _heads_forward_loop(X, W1, b1, W2, b2, mask):
    M, D, H = W1.shape
    B = X.shape[0]
    has_mask = mask.shape[0] > 0
    S = np.empty((M, B))
    A = np.empty((M, B, H))
    for m in range(M):
        Z = X @ W1[m]
        for b in range(B):
            lo = b2[m]
            for j in range(H):
                v = Z[b, j] + b1[m, j]
                if v < 0.0:
                    v = 0.0
                if has_mask:
                    v *= mask[m, b, j]
                A[m, b, j] = v
                lo += v * W2[m, j]
            S[m, b] = 1.0 / (1.0 + np.exp(-lo))
    return S, A


def _heads_backward_loop(X, A, mask, W2, dlogit):
    M, B, H = A.shape
    has_mask = mask.shape[0] > 0
    XT = np.ascontiguousarray(X.T)
    gW1 = np.empty((M, X.shape[1], H))
    gb1 = np.zeros((M, H))
    gW2 = np.zeros((M, H))
    gb2 = np.zeros(M)
    dZ = np.empty((B, H))
    for m in range(M):
        for b in range(B):
            g = dlogit[m, b]
            gb2[m] += g
            for j in range(H):
                a = A[m, b, j]
                gW2[m, j] += g * a
                if a > 0.0:
                    d = g * W2[m, j]
                    if has_mask:
                        d *= mask[m, b, j]
                else:
                    d = 0.0
                dZ[b, j] = d
                gb1[m, j] += d
        gW1[m] = XT @ dZ
    return gW1, gb1, gW2, gb2


heads_forward_numba = _njit(_heads_forward_loop)
heads_backward_numba = _njit(_heads_backward_loop)


# ---------------------------------------------------------------------------
# exact top-k with (distance, index) ordering


def topk_rows_numpy(dist, k):
    """Indices of the k smallest entries per row, ties by ascending column."""
    n_rows, n_cols = dist.shape
    out = np.empty((n_rows, k), dtype=np.int64)
    if k == n_cols:
        for i in range(n_rows):
            out[i] = np.argsort(dist[i], kind="stable")
        return out
    part = np.partition(dist, k - 1, axis=1)[:, k - 1]
    for i in range(n_rows):
        row = dist[i]
        cand = np.flatnonzero(row <= part[i])
        order = np.lexsort((cand, row[cand]))
        out[i] = cand[order[:k]]
    return out


def _topk_rows_loop(dist, k):
    n_rows, n_cols = dist.shape
    out = np.empty((n_rows, k), dtype=np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for r in range(n_rows):
        filled = 0
        for c in range(n_cols):
            d = dist[r, c]
            if filled == k:
                # columns arrive in ascending order, so an equal distance loses
                if d >= best_d[k - 1]:
                    continue
                pos = k - 1
            else:
                pos = filled
                filled += 1
            while pos > 0 and best_d[pos - 1] > d:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = d
            best_i[pos] = c
        for j in range(k):
            out[r, j] = best_i[j]
    return out


topk_rows_numba = _njit(_topk_rows_loop)


if USE_NUMBA:
    heads_forward = heads_forward_numba
    heads_backward = heads_backward_numba
    topk_rows = topk_rows_numba
else:
    heads_forward = heads_forward_numpy
    heads_backward = heads_backward_numpy
    topk_rows = topk_rows_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
