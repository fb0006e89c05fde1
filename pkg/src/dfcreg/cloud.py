"""Point-cloud containers, file IO, voxel downsampling and synthetic data."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .geometry import RigidTransform, random_rotation


@dataclass
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or len(self.features) != len(self.points):
                raise ValueError(
                    f"features shape {self.features.shape} does not match {len(self.points)} points"
                )

    def __len__(self):
        return len(self.points)


@dataclass
class SyntheticPair:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    gt_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # target index matched to each source point, -1 when unmatched
    gt_match: np.ndarray | None = None


# ---------------------------------------------------------------- IO

FORMATS = ("ply_ascii", "xyz", "csv")


def infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    return {".ply": "ply_ascii", ".xyz": "xyz", ".txt": "xyz", ".csv": "csv"}.get(ext, "xyz")


def _load_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    elements = []  # (name, count, [props])
    end = None
    for no, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"unsupported PLY format {' '.join(tok[1:])!r}", no)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", no)
            try:
                elements.append((tok[1], int(tok[2]), []))
            except ValueError:
                raise ParseError(f"bad element count {tok[2]!r}", no) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", no)
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            end = no
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", no)
    if end is None:
        raise ParseError("missing end_header", len(lines))

    row = end  # index into lines of the next body line
    points = np.zeros((0, 3))
    for name, count, props in elements:
        if name != "vertex":
            row += count
            continue
        try:
            cols = [props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise ParseError("vertex element lacks x/y/z properties", end) from None
        points = np.empty((count, 3))
        for i in range(count):
            no = row + 1
            if row >= len(lines):
                raise ParseError(f"expected {count} vertices, file ended", no)
            tok = lines[row].split()
            if len(tok) < len(props):
                raise ParseError(f"expected {len(props)} values, got {len(tok)}", no)
            try:
                points[i] = [float(tok[c]) for c in cols]
            except ValueError:
                raise ParseError(f"non-numeric vertex value in {lines[row].strip()!r}", no) from None
            row += 1
    return points


def _load_table(lines, sep):
    out = []
    for no, raw in enumerate(lines, start=1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        tok = [t for t in (s.split(",") if sep == "," else s.replace(",", " ").split()) if t.strip()]
        if len(tok) < 3:
            raise ParseError(f"expected at least 3 values, got {len(tok)}", no)
        try:
            out.append([float(t) for t in tok[:3]])
        except ValueError:
            raise ParseError(f"non-numeric value in {s!r}", no) from None
    return np.array(out, dtype=np.float64).reshape(-1, 3)


def load(path, format: str | None = None) -> PointCloud:
    """Read a cloud from ASCII PLY, XYZ or CSV. Raises ParseError or OSError."""
    fmt = format or infer_format(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if fmt == "ply_ascii":
        pts = _load_ply(lines)
    elif fmt == "xyz":
        pts = _load_table(lines, None)
    elif fmt == "csv":
        pts = _load_table(lines, ",")
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if not np.all(np.isfinite(pts)):
        raise ParseError("non-finite coordinate")
    return PointCloud(pts)


def save(cloud: PointCloud, path, format: str | None = None) -> None:
    fmt = format or infer_format(path)
    pts = cloud.points
    sep = "," if fmt == "csv" else " "
    body = "".join(f"{x:.17g}{sep}{y:.17g}{sep}{z:.17g}\n" for x, y, z in pts)
    with open(path, "w", encoding="utf-8") as fh:
        if fmt == "ply_ascii":
            fh.write(
                "ply\nformat ascii 1.0\n"
                f"element vertex {len(pts)}\n"
                "property double x\nproperty double y\nproperty double z\nend_header\n"
            )
        elif fmt not in ("xyz", "csv"):
            raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
        fh.write(body)


# ---------------------------------------------------------------- voxel grid


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output rows follow ascending lexicographic voxel index. Per-point features,
    when present, are averaged the same way.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(pts.copy(), None if cloud.features is None else cloud.features.copy())
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(counts), 3))
    for d in range(3):
        np.add.at(sums[:, d], inv, pts[:, d])
    feats = None
    if cloud.features is not None:
        feats = np.zeros((len(counts), cloud.features.shape[1]))
        np.add.at(feats, inv, cloud.features)
        feats /= counts[:, None]
    return PointCloud(sums / counts[:, None], feats)


# ---------------------------------------------------------------- synthetic data


def make_synthetic_pair(n_points: int, outlier_ratio: float, noise_sigma: float, rng, tau: float = 0.05):
    """Unit-cube scene, random rigid motion, and a correspondence set.

    Correspondence i pairs source point i with its transformed (noisy) copy;
    a random ``outlier_ratio`` share is re-paired with a uniformly drawn target
    point. Labels mark pairs whose ground-truth residual is below ``tau``.
    """
    from .features import CorrespondenceSet

    if n_points < 10:
        raise ValueError("n_points must be >= 10")
    if not 0.0 <= outlier_ratio <= 1.0:
        raise ValueError("outlier_ratio must lie in [0, 1]")
    src = rng.random((n_points, 3))
    gt = RigidTransform(random_rotation(rng), rng.uniform(-1.0, 1.0, size=3))
    dst = gt.apply(src)
    if noise_sigma > 0:
        dst = dst + rng.normal(0.0, noise_sigma, size=dst.shape)
    match = np.arange(n_points)
    n_out = int(round(outlier_ratio * n_points))
    if n_out:
        bad = rng.choice(n_points, size=n_out, replace=False)
        match[bad] = rng.integers(0, n_points, size=n_out)
    residual = np.linalg.norm(gt.apply(src) - dst[match], axis=1)
    labels = (residual < tau).astype(np.int64)
    pair = SyntheticPair(PointCloud(src), PointCloud(dst), gt, labels, np.arange(n_points))
    corrs = CorrespondenceSet(src.copy(), dst[match].copy(), labels=labels.copy(),
                              src_index=np.arange(n_points), dst_index=match)
    return pair, corrs


def augment(cloud: PointCloud, rng, noise: float = 0.03, translation_range: float = 1.0):
    """Random rotation + uniform translation + Gaussian jitter.

    Returns the augmented cloud and the rigid part of the applied motion.
    """
    tf = RigidTransform(random_rotation(rng), rng.uniform(-translation_range, translation_range, size=3))
    pts = tf.apply(cloud.points)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    feats = None if cloud.features is None else cloud.features.copy()
    return PointCloud(pts, feats), tf
