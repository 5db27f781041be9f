"""Exact brute-force Euclidean kNN with deterministic tie-breaking."""
from __future__ import annotations

import numpy as np


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``A`` and rows of ``B``."""
    aa = np.einsum("ij,ij->i", A, A)
    bb = np.einsum("ij,ij->i", B, B)
    d = aa[:, None] + bb[None, :] - 2.0 * (A @ B.T)
    np.maximum(d, 0.0, out=d)
    return d


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    # ordering key is (distance, reference index); argpartition alone is not
    # stable across ties at the k-th value, so rows with boundary ties are
    # resolved exactly
    n_ref = d.shape[1]
    rows = np.arange(d.shape[0])[:, None]
    if k < n_ref:
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
    else:
        part = np.broadcast_to(np.arange(n_ref), d.shape).copy()
    kth = d[rows, part].max(axis=1)
    n_le = (d <= kth[:, None]).sum(axis=1)
    for i in np.flatnonzero(n_le > k):
        cand = np.flatnonzero(d[i] <= kth[i])
        order = np.lexsort((cand, d[i, cand]))
        part[i] = cand[order[:k]]
    order = np.lexsort((part, d[rows, part]), axis=1)
    return np.take_along_axis(part, order, axis=1)


def knn(query: np.ndarray, ref: np.ndarray, k: int, exclude_self: bool = False,
        block: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(indices, distances)`` of the ``k`` nearest rows of ``ref``.

    With ``exclude_self`` the query set must be ``ref`` itself and row ``i``
    never lists ``i``. Ties are broken by lower reference index.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    n_avail = ref.shape[0] - (1 if exclude_self else 0)
    if k > n_avail:
        raise ValueError(f"k={k} exceeds the {n_avail} available reference points")
    if exclude_self and query.shape[0] != ref.shape[0]:
        raise ValueError("exclude_self requires query to be the reference set")

    n = query.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        d = sq_distances(query[start:stop], ref)
        if exclude_self:
            d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        nb = _smallest_k(d, k)
        idx[start:stop] = nb
        dist[start:stop] = np.sqrt(np.take_along_axis(d, nb, axis=1))
    return idx, dist
