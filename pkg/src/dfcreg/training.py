"""Losses, label generation and a plain SGD loop for the embedding + weighting nets.

Only the classification loss is back-propagated. The transformation loss is
evaluated on validation pairs through the full (non-differentiable)
matching pipeline and reported alongside it.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gfm_net, nn, weighting
from .checkpoint import Checkpoint, init_checkpoint
from .cloud import make_synthetic_pair
from .errors import DivergenceDetected, LengthMismatch
from .geometry import RigidTransform

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


# ---------------------------------------------------------------- losses


def _check_lengths(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} predictions but {len(b)} labels")
    if len(a) == 0:
        raise LengthMismatch("empty input")
    return a, b


def classification_loss(confidences, labels, eps: float = BCE_EPS):
    """Mean binary cross-entropy and its gradient w.r.t. the confidences.

    Confidences are clamped to [eps, 1 - eps]; the loss is evaluated from the
    corresponding logit with the log-sigmoid form. Clamped entries get zero
    gradient.
    """
    c, l = _check_lengths(confidences, labels)
    cc = np.clip(c, eps, 1.0 - eps)
    z = np.log(cc) - np.log1p(-cc)
    loss = -np.mean(l * nn.log_sigmoid(z) + (1.0 - l) * nn.log_sigmoid(-z))
    grad = (cc - l) / (cc * (1.0 - cc)) / len(c)
    grad[(c < eps) | (c > 1.0 - eps)] = 0.0
    return float(loss), grad


def classification_loss_logits(logits, labels):
    """Same loss taken directly from logits; gradient (sigmoid(z) - l) / N."""
    z, l = _check_lengths(logits, labels)
    loss = -np.mean(l * nn.log_sigmoid(z) + (1.0 - l) * nn.log_sigmoid(-z))
    return float(loss), (nn.sigmoid(z) - l) / len(z)


def transformation_loss(tf_est: RigidTransform, tf_gt: RigidTransform) -> float:
    """||R_est^T R_gt - I||_F^2 + ||t_est - t_gt||^2 (evaluation only)."""
    D = tf_est.rotation.T @ tf_gt.rotation - np.eye(3)
    dt = tf_est.translation - tf_gt.translation
    return float((D * D).sum() + dt @ dt)


def transformation_loss_grad(tf_est: RigidTransform, tf_gt: RigidTransform):
    """Gradient of ``transformation_loss`` w.r.t. the entries of R_est and t_est.

    R_est is treated as an unconstrained 3x3 matrix (no projection onto SO(3)).
    """
    D = tf_est.rotation.T @ tf_gt.rotation - np.eye(3)
    return 2.0 * tf_gt.rotation @ D.T, 2.0 * (tf_est.translation - tf_gt.translation)


def generate_labels(corrs, gt: RigidTransform, tau: float) -> np.ndarray:
    """1 where the ground-truth residual is strictly below tau."""
    r = np.linalg.norm(gt.apply(corrs.src) - corrs.dst, axis=1)
    return (r < tau).astype(np.int64)


# ---------------------------------------------------------------- config / reports


@dataclass(frozen=True)
class LossReport:
    epoch: int
    l_c: float
    l_t: float
    lam: float = 1e-2
    train_l_c: float = float("nan")

    @property
    def total(self) -> float:
        return self.l_c + self.lam * self.l_t


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.03
    seed: int = 0
    lam: float = 1e-2
    # synthetic data
    n_train_pairs: int = 500
    n_val_pairs: int = 50
    n_points: int = 256
    outlier_min: float = 0.5
    outlier_max: float = 0.9
    noise_sigma: float = 0.01
    tau: float = 0.05
    # network
    graph_k: int = 8
    scale_channels: tuple = (32, 32, 64)
    out_dim: int = 32
    backend: str = "gfm"
    mlp_hidden: tuple = (128, 64)
    # transformation-loss evaluation
    lt_pairs: int = 10
    n_s: int = 200
    subset_k: int = 40
    sigma2: float = 1.0
    # training pairs used to re-estimate batch-norm statistics after every epoch
    bn_refresh_pairs: int = 64
    # stop once validation l_c <= stop_ratio * initial (None: run all epochs)
    stop_ratio: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "scale_channels", tuple(self.scale_channels))
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be nonnegative")
        if min(self.batch_size, self.n_train_pairs, self.n_val_pairs, self.n_points, self.bn_refresh_pairs) < 1:
            raise ValueError("batch size, pair counts and n_points must be positive")
        if not 0.0 <= self.outlier_min <= self.outlier_max <= 1.0:
            raise ValueError("outlier range must satisfy 0 <= min <= max <= 1")
        if self.tau <= 0 or self.noise_sigma < 0:
            raise ValueError("tau must be positive and noise nonnegative")

    def gfm_config(self) -> gfm_net.GfmConfig:
        return gfm_net.GfmConfig(graph_k=self.graph_k, scale_channels=self.scale_channels,
                                 out_dim=self.out_dim, backend=self.backend)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------- data


@dataclass
class _Sample:
    graph: gfm_net.GraphInput
    corrs: object
    gt: RigidTransform
    labels: np.ndarray


def make_dataset(cfg: TrainConfig, n_pairs: int, stream: int) -> list:
    rng = np.random.default_rng([cfg.seed, stream])
    gcfg = cfg.gfm_config()
    out = []
    for _ in range(n_pairs):
        r = rng.uniform(cfg.outlier_min, cfg.outlier_max)
        pair, corrs = make_synthetic_pair(cfg.n_points, r, cfg.noise_sigma, rng, tau=cfg.tau)
        out.append(_Sample(gfm_net.graph_input(gcfg, corrs), corrs, pair.gt, corrs.labels.astype(np.float64)))
    return out


# ---------------------------------------------------------------- gradients


def batch_loss_and_grads(ckpt: Checkpoint, samples, need_grads: bool = True, update_running: bool = True):
    """Train-mode forward over the concatenated batch; returns (loss, gfm grads, mlp grads)."""
    F, trace = gfm_net.forward(ckpt.gfm, ckpt.gfm_config, [s.graph for s in samples], mode="train",
                               need_trace=need_grads, update_running=update_running)
    z, cache = weighting.logits_forward(ckpt.mlp, F)
    labels = np.concatenate([s.labels for s in samples])
    loss, dz = classification_loss_logits(z, labels)
    if not need_grads:
        return loss, None, None
    g_mlp, dF = weighting.logits_backward(dz, cache)
    g_gfm = gfm_net.backward(trace, ckpt.gfm, dF, ckpt.gfm_config)
    return loss, g_gfm, g_mlp


def refresh_bn_stats(ckpt: Checkpoint, samples, batch_size: int) -> None:
    """Set every running mean/var to the average of its train-mode batch statistics.

    Batches are taken in the given order, so the result depends only on the
    weights and the samples.
    """
    batches = [samples[s:s + batch_size] for s in range(0, len(samples), batch_size)]
    for i, batch in enumerate(batches):
        cfg = dataclasses.replace(ckpt.gfm_config, bn_momentum=1.0 / (i + 1))
        gfm_net.forward(ckpt.gfm, cfg, [s.graph for s in batch], mode="train")


def eval_confidences(ckpt: Checkpoint, graph_or_corrs):
    F, _ = gfm_net.forward(ckpt.gfm, ckpt.gfm_config, graph_or_corrs, mode="eval")
    return F, weighting.confidence(ckpt.mlp, F)


def validation_losses(ckpt: Checkpoint, val, cfg: TrainConfig):
    from .bench import dfc_hypothesis

    lc = []
    for s in val:
        _, c = eval_confidences(ckpt, s.graph)
        lc.append(classification_loss(c, s.labels)[0])
    lt = []
    for s in val[: cfg.lt_pairs]:
        F, c = eval_confidences(ckpt, s.graph)
        try:
            h = dfc_hypothesis(s.corrs, F, c, n_s=cfg.n_s, subset_k=min(cfg.subset_k, len(F)),
                               sigma2=cfg.sigma2, tau=cfg.tau)
            lt.append(transformation_loss(h.transform, s.gt))
        except Exception as exc:  # a failed estimate is scored as the worst rotation
            log.debug("validation pair failed: %s", exc)
            lt.append(8.0 + float(s.gt.translation @ s.gt.translation))
    return float(np.mean(lc)), float(np.mean(lt)) if lt else 0.0


def _sgd_step(params, grads, lr):
    for k, g in grads.items():
        params[k] = params[k] - lr * g


def train(cfg: TrainConfig = TrainConfig(), trace_path=None, progress=None) -> TrainResult:
    """Mini-batch SGD on synthetic pairs; deterministic for a fixed seed.

    The trace holds one LossReport per epoch, starting with epoch 0 (the
    initialisation). Batch-norm running statistics are re-estimated from the
    first ``bn_refresh_pairs`` training pairs before each evaluation, so they
    are a function of the weights alone. Raises DivergenceDetected on a
    non-finite loss.
    """
    init_rng = np.random.default_rng([cfg.seed, 0])
    ckpt = init_checkpoint(cfg.gfm_config(), init_rng, cfg.mlp_hidden)
    ckpt.meta = {"train_config": asdict(cfg)}
    train_set = make_dataset(cfg, cfg.n_train_pairs, 1)
    val = make_dataset(cfg, cfg.n_val_pairs, 2)
    shuffle = np.random.default_rng([cfg.seed, 3])
    bn_set = train_set[: cfg.bn_refresh_pairs]
    refresh_bn_stats(ckpt, bn_set, cfg.batch_size)

    lc, lt = validation_losses(ckpt, val, cfg)
    trace = [LossReport(0, lc, lt, cfg.lam)]
    if progress:
        progress(trace[-1])
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(train_set))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[s:s + cfg.batch_size]]
            loss, g_gfm, g_mlp = batch_loss_and_grads(ckpt, batch, update_running=False)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            _sgd_step(ckpt.gfm, g_gfm, cfg.lr)
            _sgd_step(ckpt.mlp, g_mlp, cfg.lr)
            losses.append(loss)
        refresh_bn_stats(ckpt, bn_set, cfg.batch_size)
        lc, lt = validation_losses(ckpt, val, cfg)
        if not (np.isfinite(lc) and np.isfinite(lt)):
            raise DivergenceDetected(f"non-finite validation loss at epoch {epoch}")
        trace.append(LossReport(epoch, lc, lt, cfg.lam, float(np.mean(losses))))
        if progress:
            progress(trace[-1])
        if cfg.stop_ratio is not None and lc <= cfg.stop_ratio * trace[0].l_c:
            break
    ckpt.meta["epochs_run"] = trace[-1].epoch
    if trace_path is not None:
        write_trace(trace, trace_path)
    return TrainResult(ckpt, trace)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_c", "l_t", "total"])
        for r in trace:
            w.writerow([r.epoch, repr(r.l_c), repr(r.l_t), repr(r.total)])
