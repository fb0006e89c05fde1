"""Pointwise descriptor providers and putative correspondence construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import DimensionMismatch, EmptyCloud, MissingContext


@dataclass
class CorrespondenceSet:
    """N putative matches (x_i, y_j), optionally with features/confidences/labels."""

    src: np.ndarray
    dst: np.ndarray
    features: np.ndarray | None = None
    confidences: np.ndarray | None = None
    labels: np.ndarray | None = None
    src_index: np.ndarray | None = None
    dst_index: np.ndarray | None = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 3)
        n = len(self.src)
        if len(self.dst) != n:
            raise ValueError(f"{n} source points but {len(self.dst)} target points")
        for name in ("features", "confidences", "labels", "src_index", "dst_index"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} has {len(v)} rows, expected {n}")
        if self.confidences is not None:
            c = np.asarray(self.confidences)
            if np.any(c < 0) or np.any(c > 1):
                raise ValueError("confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.src)

    @property
    def as_6d(self) -> np.ndarray:
        return np.hstack([self.src, self.dst])

    def subset(self, idx) -> "CorrespondenceSet":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else np.asarray(v)[idx]  # noqa: E731
        return CorrespondenceSet(
            self.src[idx], self.dst[idx], pick(self.features), pick(self.confidences),
            pick(self.labels), pick(self.src_index), pick(self.dst_index),
        )


@dataclass(frozen=True)
class FeatureProvider:
    """Descriptor source standing in for a learned point descriptor.

    ``oracle``: ground-truth matched points share a random unit vector,
    perturbed by isotropic Gaussian noise whose expected norm is ``noise``.
    ``local_hist``: octant x radial-shell histogram of neighbour offsets.
    ``precomputed``: rows read from a CSV file.
    """

    mode: str = "oracle"
    dim: int = 32
    noise: float = 0.0
    radius: float = 0.1
    bins: int = 4
    path: str | None = None

    def __post_init__(self):
        if self.mode not in ("oracle", "local_hist", "precomputed"):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if self.mode == "local_hist":
            object.__setattr__(self, "dim", 8 * self.bins)
        if self.dim < 4:
            raise ValueError("feature dim must be >= 4")
        if self.noise < 0:
            raise ValueError("oracle noise must be >= 0")


@dataclass(frozen=True)
class OracleContext:
    """Ground-truth matching for the oracle provider.

    ``match[i]`` is the target index paired with source point i (-1 if none).
    """

    match: np.ndarray
    n_target: int
    seed: int = 0


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, n, out=np.zeros_like(a), where=n > 0)


def _oracle(provider: FeatureProvider, ctx: OracleContext, n_points: int, side: str) -> np.ndarray:
    match = np.asarray(ctx.match)
    dim = provider.dim
    base = _unit_rows(np.random.default_rng([ctx.seed, 0]).standard_normal((len(match), dim)))
    scale = provider.noise / np.sqrt(dim)
    if side == "source":
        if n_points != len(match):
            raise DimensionMismatch(f"context covers {len(match)} source points, cloud has {n_points}")
        noise = np.random.default_rng([ctx.seed, 1]).standard_normal((n_points, dim))
        return _unit_rows(base + scale * noise)
    if n_points != ctx.n_target:
        raise DimensionMismatch(f"context covers {ctx.n_target} target points, cloud has {n_points}")
    feats = _unit_rows(np.random.default_rng([ctx.seed, 2]).standard_normal((n_points, dim)))
    noise = np.random.default_rng([ctx.seed, 3]).standard_normal((n_points, dim))
    src_ids = np.flatnonzero(match >= 0)
    tgt_ids = match[src_ids]
    # a target claimed twice keeps the first claimant
    _, first = np.unique(tgt_ids, return_index=True)
    src_ids, tgt_ids = src_ids[first], tgt_ids[first]
    feats[tgt_ids] = _unit_rows(base[src_ids] + scale * noise[tgt_ids])
    return feats


def _local_hist(provider: FeatureProvider, cloud: PointCloud) -> np.ndarray:
    pts = cloud.points
    bins = provider.bins
    out = np.zeros((len(pts), 8 * bins))
    if len(pts) == 0:
        return out
    tree = cKDTree(pts)
    for i, nbrs in enumerate(tree.query_ball_point(pts, provider.radius)):
        nbrs = [j for j in nbrs if j != i]
        if not nbrs:
            continue  # isolated point: zero descriptor, low saliency
        d = pts[nbrs] - pts[i]
        octant = (d[:, 0] >= 0) * 4 + (d[:, 1] >= 0) * 2 + (d[:, 2] >= 0)
        shell = np.minimum((np.linalg.norm(d, axis=1) / provider.radius * bins).astype(int), bins - 1)
        np.add.at(out[i], octant * bins + shell, 1.0)
    return _unit_rows(out)


def load_feature_csv(path, dim: int | None = None) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            s = raw.split("#", 1)[0].strip()
            if not s:
                continue
            try:
                rows.append([float(v) for v in s.split(",")])
            except ValueError:
                raise DimensionMismatch(f"{path}:{no}: non-numeric feature value") from None
            if dim is not None and len(rows[-1]) != dim:
                raise DimensionMismatch(f"{path}:{no}: expected {dim} values, got {len(rows[-1])}")
    if rows and len({len(r) for r in rows}) != 1:
        raise DimensionMismatch(f"{path}: ragged feature rows")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1 if rows else (dim or 0))


def describe(provider: FeatureProvider, cloud: PointCloud, pair_context=None, side: str = "source") -> np.ndarray:
    """Per-point descriptors, shape (len(cloud), dim).

    ``pair_context`` is an OracleContext for oracle mode and an optional CSV path
    for precomputed mode; ``side`` selects which half of the pair ``cloud`` is.
    """
    if provider.mode == "oracle":
        if not isinstance(pair_context, OracleContext):
            raise MissingContext("oracle features need the ground-truth matching (OracleContext)")
        return _oracle(provider, pair_context, len(cloud), side)
    if provider.mode == "local_hist":
        return _local_hist(provider, cloud)
    path = pair_context if pair_context is not None else provider.path
    if path is None:
        raise MissingContext("precomputed features need a CSV path")
    feats = load_feature_csv(path, provider.dim)
    if len(feats) != len(cloud):
        raise DimensionMismatch(f"{path}: {len(feats)} feature rows for {len(cloud)} points")
    return feats


def oracle_context_from_gt(src: PointCloud, dst: PointCloud, gt, radius: float, seed: int = 0) -> OracleContext:
    """Match each source point to its nearest target under ``gt`` within ``radius``."""
    match = np.full(len(src), -1, dtype=np.int64)
    if len(src) and len(dst):
        dist, idx = cKDTree(dst.points).query(gt.apply(src.points))
        match[dist < radius] = idx[dist < radius]
    return OracleContext(match, len(dst), seed)


def nearest_feature_neighbors(query: np.ndarray, ref: np.ndarray, chunk_elems: int = 1 << 22) -> np.ndarray:
    """Exact nearest neighbour of each query row among ``ref`` rows.

    Brute force over squared Euclidean distance; ties go to the lowest index.
    """
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    step = max(1, chunk_elems // max(1, r.size))
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), step):
        d = ((q[s:s + step, None, :] - r[None, :, :]) ** 2).sum(-1)
        out[s:s + step] = np.argmin(d, axis=1)
    return out


def build_correspondences(src: PointCloud, dst: PointCloud, sample_n: int | None, rng) -> CorrespondenceSet:
    """Sample source points and pair each with its feature-space nearest target."""
    if len(src) == 0 or len(dst) == 0:
        raise EmptyCloud("cannot build correspondences from an empty cloud")
    if src.features is None or dst.features is None:
        raise DimensionMismatch("both clouds need per-point features")
    if src.features.shape[1] != dst.features.shape[1]:
        raise DimensionMismatch(
            f"feature dims differ: {src.features.shape[1]} vs {dst.features.shape[1]}"
        )
    n = len(src) if sample_n is None else min(int(sample_n), len(src))
    if n == len(src):
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(len(src), size=n, replace=False))
    nn = nearest_feature_neighbors(src.features[idx], dst.features)
    return CorrespondenceSet(src.points[idx], dst.points[nn], src_index=idx, dst_index=nn)


def oracle_correspondence_features(labels, dim: int, noise: float, rng) -> np.ndarray:
    """Correspondence-level oracle embedding: inliers share one noisy direction.

    Outliers receive independent random unit vectors. Noise has expected norm
    ``noise`` before re-normalisation, as in the pointwise oracle.
    """
    labels = np.asarray(labels).astype(bool)
    base = _unit_rows(rng.standard_normal((1, dim)))[0]
    f = _unit_rows(rng.standard_normal((len(labels), dim)))
    jitter = rng.standard_normal((int(labels.sum()), dim)) * noise / np.sqrt(dim)
    f[labels] = _unit_rows(base + jitter)
    return f
