"""Per-correspondence confidence MLP and one-shot top-N_S candidate sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ShapeMismatch

LAYERS = ("fc1", "fc2", "fc3")


def init_params(in_dim: int, rng, hidden=(128, 64), out_scale: float = 0.1) -> dict:
    """He-initialised layers; the output layer is shrunk by ``out_scale`` so
    initial confidences sit near 0.5 instead of saturating."""
    dims = [in_dim, *hidden, 1]
    params = {}
    for name, (a, b) in zip(LAYERS, zip(dims[:-1], dims[1:])):
        scale = np.sqrt(2.0 / a) * (out_scale if name == LAYERS[-1] else 1.0)
        params[f"{name}.weight"] = rng.standard_normal((a, b)) * scale
        params[f"{name}.bias"] = np.zeros(b)
    return params


def check_params(params: dict, in_dim: int | None = None) -> None:
    prev = in_dim
    for name in LAYERS:
        W = params.get(f"{name}.weight")
        b = params.get(f"{name}.bias")
        if W is None or b is None:
            raise ShapeMismatch(f"missing parameters for {name}")
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ShapeMismatch(f"{name}: weight {W.shape} / bias {b.shape} inconsistent")
        if prev is not None and W.shape[0] != prev:
            raise ShapeMismatch(f"{name} expects {W.shape[0]} inputs, got {prev}")
        prev = W.shape[1]
    if prev != 1:
        raise ShapeMismatch("last layer must have a single output")


def logits_forward(params: dict, feats: np.ndarray):
    """Raw scores before the logistic; returns (logits (N,), cache)."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeMismatch(f"expected (N, D) features, got {feats.shape}")
    check_params(params, feats.shape[1])
    h, c1 = nn.linear_forward(feats, params["fc1.weight"], params["fc1.bias"])
    h, m1 = nn.relu_forward(h)
    h, c2 = nn.linear_forward(h, params["fc2.weight"], params["fc2.bias"])
    h, m2 = nn.relu_forward(h)
    z, c3 = nn.linear_forward(h, params["fc3.weight"], params["fc3.bias"])
    return z[:, 0], (c1, m1, c2, m2, c3)


def logits_backward(dz: np.ndarray, cache):
    """Returns (parameter gradients, dL/dfeats)."""
    c1, m1, c2, m2, c3 = cache
    g = {}
    d, g["fc3.weight"], g["fc3.bias"] = nn.linear_backward(dz[:, None], c3)
    d, g["fc2.weight"], g["fc2.bias"] = nn.linear_backward(nn.relu_backward(d, m2), c2)
    d, g["fc1.weight"], g["fc1.bias"] = nn.linear_backward(nn.relu_backward(d, m1), c1)
    return g, d


def confidence(params: dict, feats: np.ndarray) -> np.ndarray:
    """Inlier likelihood in (0, 1) for every row of ``feats``."""
    z, _ = logits_forward(params, feats)
    return nn.sigmoid(z)


@dataclass(frozen=True)
class CandidateSet:
    indices: np.ndarray
    confidences: np.ndarray


def sample_candidates(confidences, n_s: int) -> CandidateSet:
    """Top ``n_s`` by confidence, descending; equal confidences keep index order."""
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    c = np.asarray(confidences, dtype=np.float64)
    order = np.argsort(-c, kind="stable")[: min(n_s, len(c))]
    return CandidateSet(order, c[order])
