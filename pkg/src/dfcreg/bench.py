"""Registration pipeline, RR/RE/TE evaluation and benchmark suites."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import classic, cloud as cloudmod, features, gfm_net, matching, weighting
from .checkpoint import Checkpoint, load_default
from .errors import DfcError, EmptyHypothesisSet, ShapeMismatch
from .geometry import PoseError, RigidTransform, pose_error, random_transform
from .verification import Hypothesis, best_index, count_inliers, count_inliers_batch

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VERIFY_SCOPES = ("full", "subset")


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class RegistrationConfig:
    sigma2: float = 1.0
    n_s: int = 200
    subset_k: int = 40
    tau: float = 0.05
    voxel: float | None = None
    sample_n: int = 5000
    feature_mode: str = "oracle"
    feature_dim: int = 32
    feature_noise: float = 0.0
    feature_radius: float = 0.1
    oracle_radius: float | None = None  # gate for gt-derived oracle matching (None: tau)
    re_max_deg: float = 5.0
    te_max: float = 0.05
    principal_mode: str = "eigenvector"
    verify_scope: str = "full"  # "subset": score each hypothesis on its own k members only
    backend: str | None = None  # None: whatever the checkpoint was built with
    icp: bool = False
    icp_max_iterations: int = 50
    icp_max_corr_dist: float | None = None  # None: tau
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.tau > 0 and self.re_max_deg > 0 and self.te_max > 0):
            raise ValueError("sigma2, tau and success thresholds must be positive")
        if min(self.n_s, self.subset_k, self.sample_n, self.icp_max_iterations) < 1:
            raise ValueError("n_s, subset_k, sample_n and icp_max_iterations must be >= 1")
        if self.voxel is not None and self.voxel <= 0:
            raise ValueError("voxel must be positive (or None to skip)")
        if self.principal_mode not in matching.PRINCIPAL_MODES:
            raise ValueError(f"principal_mode must be one of {matching.PRINCIPAL_MODES}")
        if self.verify_scope not in VERIFY_SCOPES:
            raise ValueError(f"verify_scope must be one of {VERIFY_SCOPES}")
        if self.backend is not None and self.backend not in gfm_net.BACKENDS:
            raise ValueError(f"backend must be one of {gfm_net.BACKENDS}")

    def provider(self) -> features.FeatureProvider:
        return features.FeatureProvider(self.feature_mode, self.feature_dim, self.feature_noise,
                                        radius=self.feature_radius)

    def replace(self, **kw) -> "RegistrationConfig":
        return dataclasses.replace(self, **kw)


PROFILES = {
    "synthetic": RegistrationConfig(),
    "indoor": RegistrationConfig(voxel=0.05, tau=0.10, re_max_deg=15.0, te_max=0.30, feature_radius=0.25),
    "outdoor": RegistrationConfig(voxel=0.30, tau=0.60, re_max_deg=5.0, te_max=0.60, feature_radius=1.5),
}


def profile(name: str, **overrides) -> RegistrationConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name].replace(**overrides)


# ---------------------------------------------------------------- results


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_mask: np.ndarray
    pose: PoseError | None = None
    success: bool | None = None
    stage_times: dict = field(default_factory=dict)
    total_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)


class _Stages:
    """Per-stage wall clock; DfcErrors leaving a stage get its name attached."""

    def __init__(self):
        self.times = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except DfcError as exc:
            if exc.stage is None:
                exc.stage = name
            raise
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0


def _score(tf, gt, cfg):
    if gt is None:
        return None, None
    pe = pose_error(tf, gt)
    return pe, bool(pe.re_deg < cfg.re_max_deg and pe.te < cfg.te_max)


def _count_on_members(res, ok, corrs, tau):
    m = res.members[ok]
    moved = np.einsum("bij,bkj->bki", res.rotations[ok], corrs.src[m]) + res.translations[ok][:, None, :]
    r = np.sqrt(((moved - corrs.dst[m]) ** 2).sum(-1))
    mask = r < tau
    c = mask.sum(1)
    return c, np.divide((r * mask).sum(1), c, out=np.zeros(len(c)), where=c > 0)


def dfc_hypothesis(corrs, F, conf, n_s=200, subset_k=40, sigma2=1.0, tau=0.05, mode="eigenvector",
                   stages=None, diag=None, scope="full"):
    """Candidates -> subsets -> spectral weights -> Procrustes -> best by inlier count."""
    stages = stages or _Stages()
    k = min(subset_k, len(F))
    with stages("sample"):
        cand = weighting.sample_candidates(conf, n_s)
    with stages("match"):
        corrs_f = dataclasses.replace(corrs, features=F, confidences=conf)
        res = matching.match_subsets(corrs_f, cand.indices, k, sigma2, mode)
    with stages("verify"):
        ok = np.flatnonzero(res.ok)
        if len(ok) == 0:
            raise EmptyHypothesisSet("every candidate subset was degenerate")
        if scope == "subset":
            counts, means = _count_on_members(res, ok, corrs, tau)
        else:
            counts, means = count_inliers_batch(res.rotations[ok], res.translations[ok], corrs.src, corrs.dst, tau)
        b = best_index(counts, means, np.arange(len(ok)))
        i = ok[b]
        tf = RigidTransform(res.rotations[i], res.translations[i])
        h = Hypothesis(tf, int(counts[b]), float(means[b]), int(i))
    if diag is not None:
        diag.update(n_candidates=int(len(cand.indices)), skipped_subsets=res.skipped,
                    unconverged=int((~res.converged).sum()), best_seed=int(res.seeds[i]),
                    candidate_inlier_fraction=None if corrs.labels is None
                    else float(np.mean(corrs.labels[cand.indices])))
    return h


def _check_checkpoint(ckpt: Checkpoint, cfg: RegistrationConfig):
    if cfg.backend is not None and cfg.backend != ckpt.gfm_config.backend:
        raise ShapeMismatch(f"config asks for backend {cfg.backend!r}, checkpoint has {ckpt.gfm_config.backend!r}")


def register_correspondences(corrs, cfg: RegistrationConfig, checkpoint: Checkpoint, src=None, dst=None,
                             gt=None, stages=None) -> RegistrationResult:
    """DFC on an existing correspondence set; ICP (if enabled) needs the clouds."""
    _check_checkpoint(checkpoint, cfg)
    stages = stages or _Stages()
    t0 = time.perf_counter()
    diag = {"n_correspondences": len(corrs)}
    with stages("embed"):
        F, _ = gfm_net.forward(checkpoint.gfm, checkpoint.gfm_config, corrs, mode="eval")
    with stages("weight"):
        conf = weighting.confidence(checkpoint.mlp, F)
    h = dfc_hypothesis(corrs, F, conf, cfg.n_s, cfg.subset_k, cfg.sigma2, cfg.tau, cfg.principal_mode,
                       stages, diag, cfg.verify_scope)
    tf = h.transform
    diag.update(best_inliers=h.inlier_count)
    if cfg.icp:
        if src is None or dst is None:
            raise ValueError("ICP refinement needs the source and target clouds")
        with stages("icp"):
            icp_cfg = classic.IcpConfig(cfg.icp_max_iterations, cfg.icp_max_corr_dist or cfg.tau)
            r = classic.icp_refine(src, dst, tf, icp_cfg)
        tf = r.transform
        diag.update(icp_iterations=r.iterations, icp_rmse=r.final_rmse, icp_rmse_history=r.rmse_history)
    with stages("finalize"):
        _, _, mask = count_inliers(tf, corrs, cfg.tau)
        pe, ok = _score(tf, gt, cfg)
    return RegistrationResult(tf, mask, pe, ok, dict(stages.times), time.perf_counter() - t0, diag)


def prepare_pair(src, dst, cfg: RegistrationConfig, provider=None, gt=None, oracle_context=None, stages=None):
    """Downsample, describe and match; returns (src, dst, CorrespondenceSet)."""
    stages = stages or _Stages()
    provider = provider or cfg.provider()
    with stages("downsample"):
        if cfg.voxel is not None:
            src = cloudmod.voxel_downsample(src, cfg.voxel)
            dst = cloudmod.voxel_downsample(dst, cfg.voxel)
    with stages("describe"):
        ctx_s = ctx_d = None
        if provider.mode == "oracle":
            if oracle_context is None and gt is not None:
                oracle_context = features.oracle_context_from_gt(src, dst, gt, cfg.oracle_radius or cfg.tau, cfg.seed)
            ctx_s = ctx_d = oracle_context
        src = cloudmod.PointCloud(src.points, features.describe(provider, src, ctx_s, "source"))
        dst = cloudmod.PointCloud(dst.points, features.describe(provider, dst, ctx_d, "target"))
    with stages("correspond"):
        rng = np.random.default_rng(cfg.seed)
        corrs = features.build_correspondences(src, dst, cfg.sample_n, rng)
        if gt is not None:
            r = np.linalg.norm(gt.apply(corrs.src) - corrs.dst, axis=1)
            corrs.labels = (r < cfg.tau).astype(np.int64)
    return src, dst, corrs


def register_pair(src, dst, cfg: RegistrationConfig, provider=None, checkpoint: Checkpoint | None = None,
                  gt=None, oracle_context=None) -> RegistrationResult:
    """Full pipeline from two clouds; stage errors carry a ``stage`` tag."""
    checkpoint = checkpoint or load_default()
    stages = _Stages()
    t0 = time.perf_counter()
    src, dst, corrs = prepare_pair(src, dst, cfg, provider, gt, oracle_context, stages)
    res = register_correspondences(corrs, cfg, checkpoint, src, dst, gt, stages)
    res.total_time = time.perf_counter() - t0
    res.stage_times = dict(stages.times)
    return res


# ---------------------------------------------------------------- methods


METHOD_HELP = "dfc, dfc_v1, icp_only, ransac_<n> (e.g. ransac-1k, ransac_500)"


def canonical_method(name: str) -> str:
    n = name.strip().lower().replace("-", "_")
    if n in ("dfc", "dfc_v1", "icp_only"):
        return n
    m = re.fullmatch(r"ransac_(\d+)(k?)", n)
    if m and int(m.group(1)) > 0:
        return f"ransac_{int(m.group(1)) * (1000 if m.group(2) else 1)}"
    raise ValueError(f"unknown method {name!r}; valid: {METHOD_HELP}")


def run_method(method: str, corrs, src, dst, cfg: RegistrationConfig, checkpoint, gt=None, seed=0):
    method = canonical_method(method)
    if method in ("dfc", "dfc_v1"):
        return register_correspondences(corrs, cfg.replace(icp=method == "dfc"), checkpoint, src, dst, gt)
    stages = _Stages()
    t0 = time.perf_counter()
    diag = {"n_correspondences": len(corrs)}
    if method == "icp_only":
        with stages("icp"):
            r = classic.icp_refine(src, dst, RigidTransform.identity(),
                                   classic.IcpConfig(cfg.icp_max_iterations, cfg.icp_max_corr_dist or cfg.tau))
        tf = r.transform
        diag.update(icp_iterations=r.iterations, icp_rmse=r.final_rmse)
    else:
        iters = int(method.split("_")[1])
        with stages("ransac"):
            h = classic.ransac(corrs, classic.RansacConfig(iterations=iters, tau=cfg.tau, seed=seed))
        tf = h.transform
        diag.update(best_inliers=h.inlier_count)
    with stages("finalize"):
        _, _, mask = count_inliers(tf, corrs, cfg.tau)
        pe, ok = _score(tf, gt, cfg)
    return RegistrationResult(tf, mask, pe, ok, dict(stages.times), time.perf_counter() - t0, diag)


# ---------------------------------------------------------------- suites


@dataclass(frozen=True)
class SyntheticSuite:
    n_pairs: int = 200
    n_points: int = 1000
    outlier_ratio: float = 0.7
    noise_sigma: float = 0.01
    feature_noise: float | None = None  # None: calibrated to hit outlier_ratio
    seed: int = 0

    def resolved_noise(self, dim: int) -> float:
        if self.feature_noise is not None:
            return self.feature_noise
        return calibrate_oracle_noise(self.outlier_ratio, self.n_points, dim)


def _nn_miss_rate(noise, n_points, dim, trials=4, seed=12345):
    miss = 0
    for t in range(trials):
        ctx = features.OracleContext(np.arange(n_points), n_points, seed + t)
        prov = features.FeatureProvider("oracle", dim, noise)
        fs = features.describe(prov, cloudmod.PointCloud(np.zeros((n_points, 3))), ctx, "source")
        fd = features.describe(prov, cloudmod.PointCloud(np.zeros((n_points, 3))), ctx, "target")
        miss += int((features.nearest_feature_neighbors(fs, fd) != np.arange(n_points)).sum())
    return miss / (trials * n_points)


@lru_cache(maxsize=32)
def calibrate_oracle_noise(outlier_ratio: float, n_points: int, dim: int) -> float:
    """Oracle noise at which feature matching misses ``outlier_ratio`` of points.

    Bisection on a fixed-seed Monte-Carlo estimate, so the answer is deterministic.
    """
    if not 0.0 <= outlier_ratio < 1.0:
        raise ValueError("outlier_ratio must lie in [0, 1)")
    if outlier_ratio == 0.0:
        return 0.0
    lo, hi = 0.0, 0.5
    while _nn_miss_rate(hi, n_points, dim) < outlier_ratio:
        lo, hi = hi, 2 * hi
        if hi > 64:
            raise ValueError("outlier ratio not reachable by oracle noise")
    for _ in range(18):
        mid = 0.5 * (lo + hi)
        if _nn_miss_rate(mid, n_points, dim) < outlier_ratio:
            lo = mid
        else:
            hi = mid
    return round(0.5 * (lo + hi), 6)


def synthetic_scene(suite: SyntheticSuite, index: int):
    """(src cloud, dst cloud, gt, oracle context) for pair ``index``; target order shuffled."""
    rng = np.random.default_rng([suite.seed, index])
    src = rng.random((suite.n_points, 3))
    gt = random_transform(rng)
    dst = gt.apply(src)
    if suite.noise_sigma > 0:
        dst = dst + rng.normal(0.0, suite.noise_sigma, size=dst.shape)
    perm = rng.permutation(suite.n_points)
    dst_shuffled = np.empty_like(dst)
    dst_shuffled[perm] = dst
    ctx = features.OracleContext(perm, suite.n_points, int(rng.integers(2**31)))
    return cloudmod.PointCloud(src), cloudmod.PointCloud(dst_shuffled), gt, ctx


@dataclass
class PairSpec:
    index: int
    src_path: str | None = None
    dst_path: str | None = None
    gt_path: str | None = None


def read_transform(path) -> RigidTransform:
    M = np.loadtxt(path, dtype=np.float64)
    if M.shape != (4, 4):
        raise ShapeMismatch(f"{path}: expected a 4x4 matrix, got {M.shape}")
    return RigidTransform.from_matrix(M)


def write_transform(tf: RigidTransform, path) -> None:
    np.savetxt(path, tf.as_matrix(), fmt="%.17g")


def read_manifest(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            row = [c.strip() for c in row]
            if not row or not row[0] or row[0].startswith("#"):
                continue
            if row[0].lower() in ("src", "src_path", "source"):
                continue  # header
            if len(row) < 2:
                raise ValueError(f"{path}: manifest rows need src,dst[,gt]")
            gt = row[2] if len(row) > 2 and row[2] else None
            out.append(PairSpec(len(out), row[0], row[1], gt))
    if not out:
        raise ValueError(f"{path}: empty manifest")
    return out


@dataclass
class PairRecord:
    index: int
    method: str
    success: bool | None
    re_deg: float | None
    te: float | None
    inliers: int | None
    error: str | None = None
    stage: str | None = None
    time: float = 0.0
    stage_times: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


@dataclass
class MethodSummary:
    method: str
    n_pairs: int
    n_success: int
    rr: float
    mean_re_deg: float | None
    mean_te: float | None
    mean_time: float
    median_time: float


@dataclass
class SuiteReport:
    methods: list
    records: dict  # method -> list[PairRecord] ordered by pair index
    summaries: dict
    config: RegistrationConfig
    suite: dict

    def to_json_dict(self, timings: bool = False) -> dict:
        """Deterministic content; wall-clock fields only when ``timings`` is set."""
        def rec(r: PairRecord):
            d = {"index": r.index, "success": r.success, "re_deg": r.re_deg, "te": r.te,
                 "inliers": r.inliers, "error": r.error, "stage": r.stage}
            if timings:
                d["time"] = r.time
                d["stage_times"] = r.stage_times
            return d

        def summ(s: MethodSummary):
            d = {"n_pairs": s.n_pairs, "n_success": s.n_success, "rr": s.rr,
                 "mean_re_deg": s.mean_re_deg, "mean_te": s.mean_te}
            if timings:
                d.update(mean_time=s.mean_time, median_time=s.median_time)
            return d

        return {
            "schema_version": SCHEMA_VERSION,
            "suite": self.suite,
            "config": dataclasses.asdict(self.config),
            "methods": self.methods,
            "summary": {m: summ(self.summaries[m]) for m in self.methods},
            "pairs": {m: [rec(r) for r in self.records[m]] for m in self.methods},
        }

    def table_rows(self):
        rows = []
        for m in self.methods:
            s = self.summaries[m]
            rows.append([m, f"{100 * s.rr:.2f}",
                         "-" if s.mean_re_deg is None else f"{s.mean_re_deg:.3f}",
                         "-" if s.mean_te is None else f"{s.mean_te:.4f}",
                         f"{s.mean_time:.4f}"])
        return rows

    def format_table(self) -> str:
        head = ["Method", "RR(%)", "RE(deg)", "TE", "Time(s)"]
        rows = [head] + self.table_rows()
        w = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(c.ljust(w[i]) for i, c in enumerate(r)) for r in rows)


def summarize(method: str, records) -> MethodSummary:
    n = len(records)
    ok = [r for r in records if r.success]
    times = [r.time for r in records]
    return MethodSummary(
        method, n, len(ok), len(ok) / n if n else 0.0,
        float(np.mean([r.re_deg for r in ok])) if ok else None,
        float(np.mean([r.te for r in ok])) if ok else None,
        float(np.mean(times)) if times else 0.0,
        float(np.median(times)) if times else 0.0,
    )


def _record(index, method, res: RegistrationResult | None, exc=None) -> PairRecord:
    if res is None:
        return PairRecord(index, method, False, None, None, None, f"{type(exc).__name__}: {exc}",
                          getattr(exc, "stage", None))
    pe = res.pose
    diag = {k: v for k, v in res.diagnostics.items() if k != "icp_rmse_history"}
    return PairRecord(index, method, res.success, None if pe is None else pe.re_deg,
                      None if pe is None else pe.te, int(res.inlier_mask.sum()), None, None,
                      res.total_time, res.stage_times, diag)


def _run_pair(spec, methods, cfg, checkpoint, suite):
    index = spec.index if isinstance(spec, PairSpec) else spec
    pair_cfg = cfg.replace(seed=int(np.random.default_rng([cfg.seed, index]).integers(2**31)))
    try:
        if isinstance(spec, PairSpec):
            src = cloudmod.load(spec.src_path)
            dst = cloudmod.load(spec.dst_path)
            gt = read_transform(spec.gt_path) if spec.gt_path else None
            ctx = None
        else:
            src, dst, gt, ctx = synthetic_scene(suite, index)
        src_d, dst_d, corrs = prepare_pair(src, dst, pair_cfg, None, gt, ctx)
    except (DfcError, ValueError, OSError) as exc:
        return {m: _record(index, m, None, exc) for m in methods}
    out = {}
    for m in methods:
        try:
            res = run_method(m, corrs, src_d, dst_d, pair_cfg, checkpoint, gt, seed=pair_cfg.seed)
            out[m] = _record(index, m, res)
        except (DfcError, ValueError) as exc:
            out[m] = _record(index, m, None, exc)
    return out


def run_suite(pairs, cfg: RegistrationConfig, methods, checkpoint: Checkpoint | None = None,
              threads: int = 1, suite: SyntheticSuite | None = None) -> SuiteReport:
    """Run every method on every pair with shared correspondences and seeds.

    ``pairs`` is either a list of PairSpec (manifest) or an int count of
    synthetic pairs generated from ``suite``. Failed pairs are recorded, not
    raised. Results are reduced in pair order, so thread count does not
    change the report.
    """
    methods = [canonical_method(m) for m in methods]
    if len(set(methods)) != len(methods):
        raise ValueError("duplicate methods")
    checkpoint = checkpoint or load_default()
    if isinstance(pairs, int):
        suite = suite or SyntheticSuite(n_pairs=pairs)
        suite = dataclasses.replace(suite, n_pairs=pairs)
        if cfg.feature_mode == "oracle":
            cfg = cfg.replace(feature_noise=suite.resolved_noise(cfg.feature_dim))
        specs = list(range(pairs))
        suite_info = dataclasses.asdict(suite) | {"kind": "synthetic", "feature_noise": cfg.feature_noise}
    else:
        specs = list(pairs)
        suite_info = {"kind": "manifest", "pairs": [[p.src_path, p.dst_path, p.gt_path] for p in specs]}
    if not specs:
        raise ValueError("suite needs at least one pair")
    work = lambda s: _run_pair(s, methods, cfg, checkpoint, suite)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, specs))
    else:
        results = [work(s) for s in specs]
    records = {m: [r[m] for r in results] for m in methods}
    summaries = {m: summarize(m, records[m]) for m in methods}
    return SuiteReport(methods, records, summaries, cfg, suite_info)


def write_report(report: SuiteReport, out_dir) -> dict:
    """report.json (deterministic), timing.json (wall clock) and summary.csv."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f) for k, f in
             (("json", "report.json"), ("timing", "timing.json"), ("csv", "summary.csv"))}
    with open(paths["json"], "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(paths["timing"], "w") as fh:
        json.dump(report.to_json_dict(timings=True), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "rr_percent", "re_deg", "te", "time_s"])
        w.writerows(report.table_rows())
    return paths
