"""Feature-consistency spectral matching over candidate inlier subsets.

For every candidate (seed) correspondence a subset is grown from its k-1
nearest neighbours in embedding space. Within a subset the consistency
score of two members is

    e_ij = max(0, 1 - ||f_i - f_j||^2 / sigma2)      (f L2-normalised)

with unit diagonal. The dominant direction of that matrix (nonnegative,
unit norm) is read as per-member inlier weight and fed to the weighted
Procrustes solver, giving one transform hypothesis per subset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import procrustes
from .errors import DegenerateGeometry, NonPositiveSigma, TooFewCorrespondences, ZeroWeightSum
from .geometry import RigidTransform
from .neighbors import knn_indices

PRINCIPAL_MODES = ("eigenvector", "pca")


@dataclass(frozen=True)
class InlierSubset:
    member_indices: np.ndarray
    seed_index: int


@dataclass(frozen=True)
class ConsistencyMatrix:
    matrix: np.ndarray
    sigma2: float
    zero_rows: np.ndarray  # members whose feature had zero norm


@dataclass(frozen=True)
class PrincipalVector:
    w: np.ndarray
    mode: str
    converged: bool
    iterations: int
    raw: np.ndarray  # unit iterate before orientation and clamping


def _unit_rows(f):
    n = np.linalg.norm(f, axis=-1, keepdims=True)
    return np.divide(f, n, out=np.zeros_like(f), where=n > 0), n[..., 0] > 0


def build_subsets(corrs, candidates, k: int) -> list[InlierSubset]:
    """One subset per candidate: the seed plus its k-1 nearest embeddings."""
    feats = corrs.features if hasattr(corrs, "features") else corrs
    if feats is None:
        raise ValueError("correspondences carry no embedding features")
    feats = np.asarray(feats, dtype=np.float64)
    n = len(feats)
    if k > n:
        raise TooFewCorrespondences(f"subset size {k} exceeds {n} correspondences")
    seeds = np.asarray(getattr(candidates, "indices", candidates), dtype=np.int64)
    if k == 1:
        return [InlierSubset(np.array([s]), int(s)) for s in seeds]
    nbrs = knn_indices(feats, k - 1, queries=seeds)
    return [InlierSubset(np.concatenate([[s], nb]), int(s)) for s, nb in zip(seeds, nbrs)]


def consistency_matrix(feats, sigma2: float) -> ConsistencyMatrix:
    if not sigma2 > 0:
        raise NonPositiveSigma(f"sigma2 must be positive, got {sigma2}")
    f, nonzero = _unit_rows(np.asarray(feats, dtype=np.float64))
    d2 = ((f[:, None, :] - f[None, :, :]) ** 2).sum(-1)
    M = np.maximum(0.0, 1.0 - d2 / sigma2)
    M[~nonzero, :] = 0.0
    M[:, ~nonzero] = 0.0
    np.fill_diagonal(M, 1.0)
    return ConsistencyMatrix(M, float(sigma2), np.flatnonzero(~nonzero))


def consistency_matrices(feats, sigma2: float) -> np.ndarray:
    """Batched consistency matrices for (B, k, D) member features."""
    if not sigma2 > 0:
        raise NonPositiveSigma(f"sigma2 must be positive, got {sigma2}")
    f, nonzero = _unit_rows(np.asarray(feats, dtype=np.float64))
    sq = (f * f).sum(-1)
    d2 = np.maximum(sq[:, :, None] + sq[:, None, :] - 2.0 * (f @ np.transpose(f, (0, 2, 1))), 0.0)
    d2 = 0.5 * (d2 + np.transpose(d2, (0, 2, 1)))
    M = np.maximum(0.0, 1.0 - d2 / sigma2)
    M *= (nonzero[:, :, None] & nonzero[:, None, :])
    k = M.shape[1]
    M[:, np.arange(k), np.arange(k)] = 1.0
    return M


def _power_iterate(A, max_iters, tol):
    """Batched power iteration on (B, k, k) from the uniform start.

    A subset stops updating once successive iterates differ by < tol, so
    the result for one subset does not depend on the rest of the batch.
    """
    B, k, _ = A.shape
    v = np.full((B, k), 1.0 / np.sqrt(k))
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=np.int64)
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        y = (A[idx] * v[idx][:, None, :]).sum(-1)
        norm = np.sqrt((y * y).sum(-1))
        dead = norm == 0.0
        y[~dead] /= norm[~dead][:, None]
        y[dead] = v[idx][dead]
        done = np.sqrt(((y - v[idx]) ** 2).sum(-1)) < tol
        v[idx] = y
        iters[idx] += 1
        active[idx[done | dead]] = False
    return v, ~active, iters


def _finish(v):
    flip = v.sum(-1) < 0
    v = np.where(flip[:, None], -v, v)
    w = np.maximum(v, 0.0)
    n = np.sqrt((w * w).sum(-1))
    return np.divide(w, n[:, None], out=np.zeros_like(w), where=n[:, None] > 0)


def _operator(M, mode):
    if mode == "eigenvector":
        return M
    if mode == "pca":
        # principal axis of the rows of M after removing the column means
        C = M - M.mean(axis=1, keepdims=True)
        return np.transpose(C, (0, 2, 1)) @ C
    raise ValueError(f"principal mode must be one of {PRINCIPAL_MODES}")


def principal_vectors(M, mode: str = "eigenvector", max_iters: int = 1000, tol: float = 1e-10):
    """Batched version of ``principal_vector``: returns (w, raw, converged, iterations)."""
    M = np.asarray(M, dtype=np.float64)
    raw, conv, iters = _power_iterate(_operator(M, mode), max_iters, tol)
    return _finish(raw), raw, conv, iters


def principal_vector(M, mode: str = "eigenvector", max_iters: int = 1000, tol: float = 1e-10) -> PrincipalVector:
    """Dominant direction of a consistency matrix as nonnegative unit weights.

    ``eigenvector``: power iteration on M. ``pca``: power iteration on the
    covariance of the column-centred rows of M. Either way the sign is chosen
    so the entries sum to >= 0, negatives are clamped to zero and the vector
    is renormalised. ``converged`` is False if ``max_iters`` was exhausted.
    """
    M = getattr(M, "matrix", M)
    w, raw, conv, iters = principal_vectors(np.asarray(M)[None], mode, max_iters, tol)
    return PrincipalVector(w[0], mode, bool(conv[0]), int(iters[0]), raw[0])


def subset_transform(corrs, subset: InlierSubset, w) -> RigidTransform:
    m = subset.member_indices
    return procrustes.solve(corrs.src[m], corrs.dst[m], w)


@dataclass
class MatchingResult:
    seeds: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    ok: np.ndarray  # False where the subset was degenerate and skipped
    weights: np.ndarray
    members: np.ndarray
    converged: np.ndarray

    @property
    def skipped(self) -> int:
        return int((~self.ok).sum())


def match_subsets(corrs, seeds, k: int, sigma2: float, mode: str = "eigenvector",
                  max_iters: int = 1000, tol: float = 1e-10) -> MatchingResult:
    """Subsets -> consistency -> principal vector -> weighted Procrustes, batched."""
    seeds = np.asarray(getattr(seeds, "indices", seeds), dtype=np.int64)
    subsets = build_subsets(corrs, seeds, k)
    members = np.stack([s.member_indices for s in subsets]) if subsets else np.zeros((0, k), dtype=np.int64)
    M = consistency_matrices(corrs.features[members], sigma2)
    w, _, conv, _ = principal_vectors(M, mode, max_iters, tol)
    R, t, ok = procrustes.solve_batch(corrs.src[members], corrs.dst[members], w)
    return MatchingResult(seeds, R, t, ok, w, members, conv)


def subset_transform_or_none(corrs, subset, w):
    """Scalar path used for diagnostics: None when the subset is degenerate."""
    try:
        return subset_transform(corrs, subset, w)
    except (DegenerateGeometry, ZeroWeightSum):
        return None
