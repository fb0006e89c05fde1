"""Point-to-point ICP refinement and a RANSAC baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import procrustes
from .errors import AllSamplesDegenerate, DegenerateGeometry, NoCorrespondencesInRange, ZeroWeightSum
from .geometry import RigidTransform
from .verification import Hypothesis, count_inliers, select_best

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    max_corr_dist: float = 0.05
    transform_tol: float = 1e-6
    rmse_tol: float = 1e-8

    def __post_init__(self):
        if min(self.max_iterations, self.max_corr_dist, self.transform_tol, self.rmse_tol) <= 0:
            raise ValueError("ICP settings must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    final_rmse: float
    rmse_history: list = field(default_factory=list)


def _points(c):
    return np.asarray(getattr(c, "points", c), dtype=np.float64).reshape(-1, 3)


def _truncated_rmse(d, gate):
    # pairs beyond the gate count at the gate distance, so the value is
    # non-increasing across ICP iterations
    return float(np.sqrt(np.mean(np.minimum(d, gate) ** 2)))


def icp_refine(src, dst, initial: RigidTransform, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Alternate nearest-neighbour matching and unit-weight Procrustes.

    The reported RMSE is taken over all source points with distances capped
    at ``max_corr_dist``; it never increases from one iteration to the next.
    Raises NoCorrespondencesInRange if nothing lies within the gate.
    """
    x = _points(src)
    y = _points(dst)
    if len(x) == 0 or len(y) == 0:
        raise NoCorrespondencesInRange("empty cloud")
    tree = cKDTree(y)
    gate = cfg.max_corr_dist
    current = initial
    moved = current.apply(x)
    d, nn = tree.query(moved)
    rmse = _truncated_rmse(d, gate)
    history = [rmse]
    it = 0
    while it < cfg.max_iterations:
        it += 1
        mask = d < gate
        if not mask.any():
            if it == 1:
                raise NoCorrespondencesInRange(f"no target point within {gate} of the source")
            break
        try:
            delta = procrustes.solve(moved[mask], y[nn[mask]])
        except (DegenerateGeometry, ZeroWeightSum):
            log.debug("ICP stopped on degenerate matches at iteration %d", it)
            break
        cand = delta.compose(current)
        cand_moved = cand.apply(x)
        cand_d, cand_nn = tree.query(cand_moved)
        cand_rmse = _truncated_rmse(cand_d, gate)
        if cand_rmse > rmse:
            # only reachable through rounding; keep the better iterate
            break
        current, moved, d, nn = cand, cand_moved, cand_d, cand_nn
        step = max(np.linalg.norm(delta.rotation - np.eye(3)), np.linalg.norm(delta.translation))
        drop = rmse - cand_rmse
        rmse = cand_rmse
        history.append(rmse)
        if step < cfg.transform_tol or drop < cfg.rmse_tol:
            break
    return IcpResult(current, it, rmse, history)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    sample_size: int = 3
    tau: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.sample_size < 3:
            raise ValueError("sample_size must be >= 3")


def _draw(rng, n, size):
    while True:
        s = rng.integers(0, n, size=size)
        if len(np.unique(s)) == size:
            return s


def ransac(corrs, cfg: RansacConfig = RansacConfig(), rng=None, history: list | None = None) -> Hypothesis:
    """Classic hypothesise-and-verify over minimal samples, then refit.

    Each iteration solves unit-weight Procrustes on ``sample_size`` distinct
    correspondences and counts inliers (residual < tau). The winner follows
    the verification tie rules with the iteration index as seed and is then
    refit on its consensus set.
    """
    n = len(corrs)
    if n < cfg.sample_size:
        raise ValueError(f"need at least {cfg.sample_size} correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    best = None
    for i in range(cfg.iterations):
        s = _draw(rng, n, cfg.sample_size)
        try:
            tf = procrustes.solve(corrs.src[s], corrs.dst[s])
        except (DegenerateGeometry, ZeroWeightSum):
            continue
        count, mean_r, _ = count_inliers(tf, corrs, cfg.tau)
        h = Hypothesis(tf, count, mean_r, i)
        if history is not None:
            history.append(h)
        best = h if best is None else select_best([best, h])
    if best is None:
        raise AllSamplesDegenerate(f"all {cfg.iterations} samples were degenerate")
    return _refit(corrs, best, cfg.tau)


def _refit(corrs, best: Hypothesis, tau: float, rounds: int = 5) -> Hypothesis:
    """Least squares on the consensus set, repeated until the set stops changing.

    The refit replaces the minimal-sample winner even when it scores one or
    two fewer inliers: a minimal-sample pose that is slightly off can pick up
    stray outliers near the threshold, and the consensus fit is the better pose.
    """
    h = best
    _, _, mask = count_inliers(h.transform, corrs, tau)
    for _ in range(rounds):
        if mask.sum() < 3:
            break
        try:
            tf = procrustes.solve(corrs.src[mask], corrs.dst[mask])
        except (DegenerateGeometry, ZeroWeightSum):
            break
        count, mean_r, new_mask = count_inliers(tf, corrs, tau)
        h = Hypothesis(tf, count, mean_r, best.subset_seed)
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return h
