"""Hypothesis scoring by inlier count and deterministic selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyHypothesisSet
from .geometry import RigidTransform


@dataclass(frozen=True)
class Hypothesis:
    transform: RigidTransform
    inlier_count: int
    mean_inlier_residual: float
    subset_seed: int


def residuals(tf: RigidTransform, src, dst) -> np.ndarray:
    return np.linalg.norm(tf.apply(src) - dst, axis=1)


def count_inliers(tf: RigidTransform, corrs, tau: float):
    """(count, mean residual over inliers, mask) with inlier iff residual < tau."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    r = residuals(tf, corrs.src, corrs.dst)
    mask = r < tau
    count = int(mask.sum())
    return count, float(r[mask].mean()) if count else 0.0, mask


def count_inliers_batch(rotations, translations, src, dst, tau: float, chunk: int = 64):
    """Counts and mean inlier residuals for B hypotheses over the same pairs."""
    B = len(rotations)
    counts = np.zeros(B, dtype=np.int64)
    means = np.zeros(B)
    for s in range(0, B, chunk):
        R = rotations[s:s + chunk]
        t = translations[s:s + chunk]
        moved = np.einsum("bij,nj->bni", R, src) + t[:, None, :]
        r = np.sqrt(((moved - dst[None]) ** 2).sum(-1))
        mask = r < tau
        c = mask.sum(1)
        counts[s:s + chunk] = c
        means[s:s + chunk] = np.divide((r * mask).sum(1), c, out=np.zeros(len(c)), where=c > 0)
    return counts, means


def _key(h: Hypothesis):
    return (-h.inlier_count, h.mean_inlier_residual, h.subset_seed)


def select_best(hypotheses) -> Hypothesis:
    """Most inliers; ties by smaller mean residual, then lower seed index."""
    hyps = list(hypotheses)
    if not hyps:
        raise EmptyHypothesisSet("no hypotheses to verify")
    return min(hyps, key=_key)


def best_index(counts, means, seeds) -> int:
    """Array form of ``select_best``."""
    counts = np.asarray(counts)
    if len(counts) == 0:
        raise EmptyHypothesisSet("no hypotheses to verify")
    order = np.lexsort((np.asarray(seeds), np.asarray(means), -counts))
    return int(order[0])
