"""Closed-form weighted least-squares rigid alignment.

For pairs (x_i, y_i) with weights w_i the solver minimises

    E1 = 1/N * sum_i w_i * ||R x_i + t - y_i||^2

via the SVD of the weighted cross-covariance H = sum_i w_i (x_i - xbar)(y_i - ybar)^T.
With H = U S V^T the rotation is R = V diag(1, 1, det(V U^T)) U^T and t = ybar - R xbar.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometry, ZeroWeightSum
from .geometry import RigidTransform

WEIGHT_EPS = 1e-12
DEGENERACY_RTOL = 1e-12


def _as_pairs(source, target, weights, min_pairs=1):
    x = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if weights is None:
        w = np.ones(len(x))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not (len(x) == len(y) == len(w)):
        raise ValueError(f"length mismatch: {len(x)} source, {len(y)} target, {len(w)} weights")
    if len(x) < min_pairs:
        raise DegenerateGeometry(f"need at least {min_pairs} pairs, got {len(x)}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    return x, y, w


def weighted_centroids(source, target, weights=None):
    x, y, w = _as_pairs(source, target, weights)
    total = w.sum()
    if total <= WEIGHT_EPS:
        raise ZeroWeightSum(f"sum of weights {total:g} <= {WEIGHT_EPS:g}")
    return w @ x / total, w @ y / total


def cross_covariance(source, target, weights=None, centroids=None) -> np.ndarray:
    x, y, w = _as_pairs(source, target, weights)
    if centroids is None:
        centroids = weighted_centroids(x, y, w)
    xbar, ybar = centroids
    return ((x - xbar) * w[:, None]).T @ (y - ybar)


def rotation_from_covariance(H: np.ndarray) -> np.ndarray:
    U, S, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    return V @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T


def _check_rank(S) -> None:
    if S[0] <= WEIGHT_EPS or (S[1] < DEGENERACY_RTOL * S[0] and S[2] < DEGENERACY_RTOL * S[0]):
        raise DegenerateGeometry(f"cross-covariance singular values {S.tolist()} are rank-deficient")


def solve(source, target, weights=None) -> RigidTransform:
    """Weighted rigid transform mapping ``source`` onto ``target``.

    Raises ZeroWeightSum when the weights vanish and DegenerateGeometry when the
    weighted support is collinear or coincident.
    """
    x, y, w = _as_pairs(source, target, weights, min_pairs=3)
    if np.count_nonzero(w > 0) < 3:
        total = w.sum()
        if total <= WEIGHT_EPS:
            raise ZeroWeightSum(f"sum of weights {total:g} <= {WEIGHT_EPS:g}")
        raise DegenerateGeometry("fewer than 3 strictly positive weights")
    xbar, ybar = weighted_centroids(x, y, w)
    H = cross_covariance(x, y, w, (xbar, ybar))
    _check_rank(np.linalg.svd(H, compute_uv=False))
    R = rotation_from_covariance(H)
    return RigidTransform(R, ybar - R @ xbar)


def weighted_mse(tf: RigidTransform, source, target, weights=None) -> float:
    x, y, w = _as_pairs(source, target, weights)
    r = tf.apply(x) - y
    return float(np.sum(w * np.einsum("ij,ij->i", r, r)) / len(x))


def solve_batch(source, target, weights):
    """Vectorised ``solve`` over B independent problems.

    source, target: (B, k, 3); weights: (B, k). Returns rotations (B, 3, 3),
    translations (B, 3) and a boolean ``ok`` mask; entries where ``ok`` is False
    hit ZeroWeightSum/DegenerateGeometry in the scalar solver and hold identity.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    B = x.shape[0]
    total = w.sum(axis=1)
    ok = (total > WEIGHT_EPS) & (np.count_nonzero(w > 0, axis=1) >= 3)
    safe_total = np.where(ok, total, 1.0)
    xbar = np.einsum("bk,bkj->bj", w, x) / safe_total[:, None]
    ybar = np.einsum("bk,bkj->bj", w, y) / safe_total[:, None]
    xc = x - xbar[:, None, :]
    yc = y - ybar[:, None, :]
    H = np.einsum("bk,bki,bkj->bij", w, xc, yc)
    U, S, Vt = np.linalg.svd(H)
    ok &= (S[:, 0] > WEIGHT_EPS) & ~(
        (S[:, 1] < DEGENERACY_RTOL * S[:, 0]) & (S[:, 2] < DEGENERACY_RTOL * S[:, 0])
    )
    V = np.transpose(Vt, (0, 2, 1))
    Ut = np.transpose(U, (0, 2, 1))
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    D = np.zeros((B, 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ Ut
    R[~ok] = np.eye(3)
    t = ybar - np.einsum("bij,bj->bi", R, xbar)
    t[~ok] = 0.0
    return R, t, ok
