"""Exact k-nearest-neighbour search with deterministic tie-breaking.

Brute force over squared Euclidean distance in row chunks. Neighbours are
sorted by ascending distance, ties by ascending index.
"""
from __future__ import annotations

import numpy as np


def _sq_dists(q, ref):
    return ((q[:, None, :] - ref[None, :, :]) ** 2).sum(-1)


def _exact_rows(pts, rows, k, exclude_self, cols):
    """Full-row search: sort every candidate by (distance, index)."""
    d2 = _sq_dists(pts[rows], pts)
    if exclude_self:
        d2[np.arange(len(rows)), rows] = np.inf
    return np.stack([np.lexsort((cols, d))[:k] for d in d2])


def knn_indices(points, k: int, queries=None, exclude_self: bool = True, chunk_elems: int = 1 << 22):
    """Indices (len(queries), k) of the k nearest rows of ``points``.

    ``queries`` are row indices into ``points`` (default: all rows). With
    ``exclude_self`` the query row itself is never returned, but exact
    duplicates of it are.

    Candidates come from the Gram-matrix form of the distance (one BLAS
    call); their distances are then recomputed directly. A row whose cut
    is closer than the Gram rounding bound is redone by full search, so
    the result always equals brute force, ties included.
    """
    pts = np.asarray(points, dtype=np.float64)
    n, dim = pts.shape
    qidx = np.arange(n) if queries is None else np.asarray(queries, dtype=np.int64)
    avail = n - 1 if exclude_self else n
    if k > avail or k < 1:
        raise ValueError(f"cannot take {k} neighbours from {avail} candidates")
    out = np.empty((len(qidx), k), dtype=np.int64)
    cols = np.arange(n)
    c = k + max(8, k // 2)  # candidates per row
    if c >= avail:
        step = max(1, chunk_elems // max(1, pts.size))
        for s in range(0, len(qidx), step):
            out[s:s + step] = _exact_rows(pts, qidx[s:s + step], k, exclude_self, cols)
        return out
    sq = np.einsum("ij,ij->i", pts, pts)
    step = max(1, chunk_elems // max(1, n))
    for s in range(0, len(qidx), step):
        rows = qidx[s:s + step]
        r = np.arange(len(rows))
        g = sq[rows][:, None] + sq[None, :] - 2.0 * (pts[rows] @ pts.T)
        if exclude_self:
            g[r, rows] = np.inf
        part = np.argpartition(g, c, axis=1)
        cand, nxt = part[:, :c], part[:, c]
        d = ((pts[rows][:, None, :] - pts[cand]) ** 2).sum(-1)
        if exclude_self:
            d[cand == rows[:, None]] = np.inf
        order = np.lexsort((cand, d), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        kth = np.take_along_axis(d, order, axis=1)[:, k - 1]
        # |gram - exact| <= err; every non-candidate is then farther than g[nxt] - err
        err = 4.0 * (dim + 2) * np.finfo(np.float64).eps * (sq[rows] + sq.max())
        safe = g[r, nxt] - err > kth
        out[s:s + len(rows)] = cand[:, :k]
        bad = np.flatnonzero(~safe)
        if len(bad):
            out[s + bad] = _exact_rows(pts, rows[bad], k, exclude_self, cols)
    return out
