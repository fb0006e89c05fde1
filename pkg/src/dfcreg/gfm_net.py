"""Multiscale graph feature merging (GFM) embedding of correspondences.

Each correspondence m_i = [x_i, y_j] is a point in 6-D. For its k nearest
6-D neighbours the edge input is concat(m_i, m_j - m_i) (12 channels). The
network is

    edge block -> scale 1 (2 blocks) -> stride 2 -> scale 2 (2 blocks)
               -> stride 2 -> scale 3 (2 blocks)
    concat(scale1, up(scale2), up(scale3)) -> merge block -> max over neighbours

where a block is a 1x1 convolution, batch norm and ReLU. Strides and the
nearest-neighbour upsampling act on the neighbour axis. ``dgcnn_like`` keeps
only the edge block and scale 1; ``pointnet_like`` feeds m_i alone (no graph).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ShapeMismatch, StaleTrace, TooFewCorrespondences
from .neighbors import knn_indices

BACKENDS = ("gfm", "dgcnn_like", "pointnet_like")
RUNNING = (".running_mean", ".running_var")


@dataclass(frozen=True)
class GfmConfig:
    graph_k: int = 100
    scale_channels: tuple = (64, 64, 128)
    out_dim: int = 256
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    backend: str = "gfm"
    multiscale_stride: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scale_channels", tuple(int(c) for c in self.scale_channels))
        if self.graph_k < 2:
            raise ValueError("graph_k must be >= 2")
        if self.out_dim < 8:
            raise ValueError("out_dim must be >= 8")
        if len(self.scale_channels) != 3 or min(self.scale_channels) < 1:
            raise ValueError("scale_channels must be three positive integers")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")

    @classmethod
    def desk(cls, **overrides) -> "GfmConfig":
        """Reduced widths used for the desk-scale suite and training."""
        base = dict(graph_k=8, scale_channels=(32, 32, 64), out_dim=32)
        base.update(overrides)
        return cls(**base)


def layer_plan(cfg: GfmConfig):
    """(name, in_channels, out_channels) for every conv block, in forward order."""
    c1, c2, c3 = cfg.scale_channels
    if cfg.backend == "pointnet_like":
        return [("input", 6, c1), ("s1a", c1, c1), ("s1b", c1, c1), ("merge", c1, cfg.out_dim)]
    if cfg.backend == "dgcnn_like":
        return [("edge", 12, c1), ("s1a", c1, c1), ("s1b", c1, c1), ("merge", c1, cfg.out_dim)]
    return [
        ("edge", 12, c1),
        ("s1a", c1, c1), ("s1b", c1, c1),
        ("s2a", c1, c2), ("s2b", c2, c2),
        ("s3a", c2, c3), ("s3b", c3, c3),
        ("merge", c1 + c2 + c3, cfg.out_dim),
    ]


def init_params(cfg: GfmConfig, rng) -> dict:
    """He-initialised conv weights, unit BN scale, zero BN shift."""
    params = {}
    for name, cin, cout in layer_plan(cfg):
        params[f"{name}.weight"] = rng.standard_normal((cin, cout)) * np.sqrt(2.0 / cin)
        params[f"{name}.gamma"] = np.ones(cout)
        params[f"{name}.beta"] = np.zeros(cout)
        params[f"{name}.running_mean"] = np.zeros(cout)
        params[f"{name}.running_var"] = np.ones(cout)
    return params


def trainable(params: dict) -> list:
    return [k for k in params if not k.endswith(RUNNING)]


def fingerprint(params: dict, keys=None) -> str:
    h = hashlib.blake2b(digest_size=16)
    for k in keys or sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


def check_params(params: dict, cfg: GfmConfig) -> None:
    for name, cin, cout in layer_plan(cfg):
        expect = {"weight": (cin, cout), "gamma": (cout,), "beta": (cout,),
                  "running_mean": (cout,), "running_var": (cout,)}
        for part, shape in expect.items():
            key = f"{name}.{part}"
            if key not in params:
                raise ShapeMismatch(f"missing parameter {key}")
            if np.shape(params[key]) != shape:
                raise ShapeMismatch(f"{key} has shape {np.shape(params[key])}, expected {shape}")


# ---------------------------------------------------------------- graph


def _as_6d(corrs) -> np.ndarray:
    m = corrs.as_6d if hasattr(corrs, "as_6d") else np.asarray(corrs, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != 6:
        raise ShapeMismatch(f"expected (N, 6) correspondences, got {m.shape}")
    return m


def knn_graph(m6: np.ndarray, k: int) -> np.ndarray:
    if len(m6) <= k:
        raise TooFewCorrespondences(f"need more than graph_k={k} correspondences, got {len(m6)}")
    return knn_indices(m6, k)


def _edge_tensor(m6, nbr):
    """(N, k, 12) channels-last edge input."""
    mi = np.broadcast_to(m6[:, None, :], (len(m6), nbr.shape[1], 6))
    return np.concatenate([mi, m6[nbr] - mi], axis=-1)


def edge_features(corrs, k: int) -> np.ndarray:
    """Edge input in (channels=12, N, k) layout: [m_i broadcast, m_j - m_i]."""
    m6 = _as_6d(corrs)
    return np.transpose(_edge_tensor(m6, knn_graph(m6, k)), (2, 0, 1))


@dataclass(frozen=True)
class GraphInput:
    """Precomputed network input for one correspondence set (reused across epochs)."""

    edges: np.ndarray  # (N, k, 12), or (N, 1, 6) for pointnet_like
    backend: str
    graph_k: int


def graph_input(cfg: GfmConfig, corrs) -> GraphInput:
    m6 = _as_6d(corrs)
    if cfg.backend == "pointnet_like":
        return GraphInput(m6[:, None, :], cfg.backend, cfg.graph_k)
    return GraphInput(_edge_tensor(m6, knn_graph(m6, cfg.graph_k)), cfg.backend, cfg.graph_k)


def _network_input(cfg: GfmConfig, corrs_list):
    parts = []
    for c in corrs_list:
        if not isinstance(c, GraphInput):
            c = graph_input(cfg, c)
        elif (c.backend, c.graph_k) != (cfg.backend, cfg.graph_k):
            raise ShapeMismatch("precomputed input was built for a different configuration")
        parts.append(c.edges)
    return np.concatenate(parts, axis=0), [len(p) for p in parts]


# ---------------------------------------------------------------- forward / backward


@dataclass
class ForwardTrace:
    mode: str
    caches: dict = field(default_factory=dict)
    fingerprint: str = ""
    sizes: list = field(default_factory=list)


class _Runner:
    def __init__(self, params, cfg, train, record):
        self.p = params
        self.cfg = cfg
        self.train = train
        self.record = record
        self.caches = {}
        self.running = {}

    def block(self, name, x):
        N, k, C = x.shape
        x2 = x.reshape(N * k, C)
        z, lin_cache = nn.linear_forward(x2, self.p[f"{name}.weight"])
        y, bn_cache, rm, rv = nn.batchnorm_forward(
            z, self.p[f"{name}.gamma"], self.p[f"{name}.beta"],
            self.p[f"{name}.running_mean"], self.p[f"{name}.running_var"],
            self.train, self.cfg.bn_epsilon, self.cfg.bn_momentum,
        )
        out, mask = nn.relu_forward(y)
        if self.train:
            self.running[name] = (rm, rv)
        if self.record:
            self.caches[name] = (lin_cache, bn_cache, mask, x.shape)
        return out.reshape(N, k, -1)


def _stride(cfg):
    return 2 if cfg.multiscale_stride else 1


def _run(params, cfg, x0, run: _Runner):
    h = run.block(layer_plan(cfg)[0][0], x0)
    g1 = run.block("s1b", run.block("s1a", h))
    if cfg.backend == "gfm":
        s = _stride(cfg)
        k = x0.shape[1]
        g2 = run.block("s2b", run.block("s2a", g1[:, ::s]))
        g3 = run.block("s3b", run.block("s3a", g2[:, ::s]))
        up = np.arange(k)
        cat = np.concatenate([g1, g2[:, up // s], g3[:, up // (s * s)]], axis=-1)
    else:
        cat = g1
    f = run.block("merge", cat)
    out, pool_cache = nn.max_over_neighbors(f)
    if run.record:
        run.caches["pool"] = pool_cache
    return out


def forward(params: dict, cfg: GfmConfig, corrs, mode: str = "eval", need_trace: bool = False,
            update_running: bool = True):
    """Embed correspondences; returns (F_M of shape (N, out_dim), trace or None).

    ``corrs`` may be a CorrespondenceSet, an (N, 6) array, or a list of either;
    lists are stacked along N and share batch-norm statistics in train mode.
    Train mode writes the updated running statistics back into ``params``
    unless ``update_running`` is False.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    check_params(params, cfg)
    corrs_list = corrs if isinstance(corrs, (list, tuple)) else [corrs]
    x0, sizes = _network_input(cfg, corrs_list)
    run = _Runner(params, cfg, mode == "train", need_trace)
    out = _run(params, cfg, x0, run)
    if mode == "train" and update_running:
        for name, (rm, rv) in run.running.items():
            params[f"{name}.running_mean"] = rm
            params[f"{name}.running_var"] = rv
    trace = None
    if need_trace:
        trace = ForwardTrace(mode, run.caches, fingerprint(params, trainable(params)), sizes)
    return out, trace


def _block_backward(name, dout, caches, grads, need_dx=True):
    lin_cache, bn_cache, mask, shape = caches[name]
    N, k, _ = shape
    d = nn.relu_backward(dout.reshape(N * k, -1), mask)
    if bn_cache is None:
        raise StaleTrace("backward needs a train-mode trace")
    d, grads[f"{name}.gamma"], grads[f"{name}.beta"] = nn.batchnorm_backward(d, bn_cache)
    x2, W = lin_cache
    grads[f"{name}.weight"] = x2.T @ d
    return (d @ W.T).reshape(shape) if need_dx else None


def _fold(d, src_idx, k_small):
    """Adjoint of nearest-neighbour upsampling along the neighbour axis."""
    N, k, C = d.shape
    if k == k_small:
        return d.copy()
    r = k // k_small
    if r * k_small == k and np.array_equal(src_idx, np.arange(k) // r):
        return d.reshape(N, k_small, r, C).sum(axis=2)
    out = np.zeros((N, k_small, C))
    np.add.at(out, (slice(None), src_idx), d)
    return out


def backward(trace: ForwardTrace, params: dict, grad_out: np.ndarray, cfg: GfmConfig) -> dict:
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    ``grad_out`` is dL/dF_M. Raises StaleTrace when ``params`` changed since
    the forward pass that produced ``trace``.
    """
    if trace is None or trace.mode != "train":
        raise StaleTrace("backward needs a train-mode trace")
    if fingerprint(params, trainable(params)) != trace.fingerprint:
        raise StaleTrace("parameters changed since the traced forward pass")
    c = trace.caches
    grads = {}
    dmerge = nn.max_over_neighbors_backward(np.asarray(grad_out, dtype=np.float64), c["pool"])
    dcat = _block_backward("merge", dmerge, c, grads)
    if cfg.backend == "gfm":
        s = _stride(cfg)
        c1, c2, _ = cfg.scale_channels
        k = dcat.shape[1]
        up = np.arange(k)
        dg1 = dcat[..., :c1].copy()
        dg2 = _fold(dcat[..., c1:c1 + c2], up // s, c["s2b"][3][1])
        dg3 = _fold(dcat[..., c1 + c2:], up // (s * s), c["s3b"][3][1])
        d = _block_backward("s3a", _block_backward("s3b", dg3, c, grads), c, grads)
        dg2[:, ::s] += d
        d = _block_backward("s2a", _block_backward("s2b", dg2, c, grads), c, grads)
        dg1[:, ::s] += d
    else:
        dg1 = dcat
    dh = _block_backward("s1a", _block_backward("s1b", dg1, c, grads), c, grads)
    _block_backward(layer_plan(cfg)[0][0], dh, c, grads, need_dx=False)
    return grads
