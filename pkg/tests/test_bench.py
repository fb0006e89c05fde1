import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from dfcreg import bench, classic, cloud
from dfcreg.checkpoint import init_checkpoint
from dfcreg.cloud import PointCloud
from dfcreg.errors import ShapeMismatch
from dfcreg.geometry import RigidTransform, axis_angle_matrix, random_transform
from dfcreg.gfm_net import GfmConfig


@pytest.fixture(scope="module")
def ckpt():
    cfg = GfmConfig(graph_k=8, scale_channels=(8, 8, 16), out_dim=16)
    return init_checkpoint(cfg, np.random.default_rng(0), (16, 8))


def clean_scene(seed=0, n=400, tf=None):
    rng = np.random.default_rng(seed)
    src = rng.random((n, 3))
    gt = tf or random_transform(rng)
    perm = rng.permutation(n)
    dst = np.empty_like(src)
    dst[perm] = gt.apply(src)
    return PointCloud(src), PointCloud(dst), gt


def test_noise_free_pair_is_exact(ckpt):
    src, dst, gt = clean_scene()
    res = bench.register_pair(src, dst, bench.RegistrationConfig(n_s=50, subset_k=20), checkpoint=ckpt, gt=gt)
    assert res.success and res.pose.re_deg < 1e-6 and res.pose.te < 1e-6
    assert res.inlier_mask.all()


def test_stage_times_cover_total(ckpt):
    src, dst, gt = clean_scene(1, 1000)
    cfg = bench.RegistrationConfig(icp=True)
    res = bench.register_pair(src, dst, cfg, checkpoint=ckpt, gt=gt)
    assert {"describe", "correspond", "embed", "weight", "sample", "match", "verify", "icp"} <= set(res.stage_times)
    assert abs(sum(res.stage_times.values()) - res.total_time) <= 0.05 * res.total_time


def test_success_flag_follows_thresholds(ckpt):
    src, dst, gt = clean_scene(2)
    res = bench.register_pair(src, dst, bench.RegistrationConfig(), checkpoint=ckpt, gt=gt)
    cfg = bench.RegistrationConfig()
    assert res.success == (res.pose.re_deg < cfg.re_max_deg and res.pose.te < cfg.te_max)


def _rmse(tf, src, dst, gate):
    d, _ = cKDTree(dst.points).query(tf.apply(src.points))
    return classic._truncated_rmse(d, gate)


def test_icp_does_not_increase_rmse(ckpt):
    suite = bench.SyntheticSuite(n_points=600, outlier_ratio=0.3, noise_sigma=0.01)
    cfg = bench.RegistrationConfig(feature_noise=suite.resolved_noise(32))
    for i in range(3):
        src, dst, gt, ctx = bench.synthetic_scene(suite, i)
        s, d, corrs = bench.prepare_pair(src, dst, cfg, gt=gt, oracle_context=ctx)
        v1 = bench.run_method("dfc_v1", corrs, s, d, cfg, ckpt, gt)
        full = bench.run_method("dfc", corrs, s, d, cfg, ckpt, gt)
        hist = full.diagnostics["icp_rmse_history"]
        assert all(b <= a for a, b in zip(hist, hist[1:]))
        assert _rmse(full.transform, s, d, cfg.tau) <= _rmse(v1.transform, s, d, cfg.tau)


def test_rr_arithmetic():
    recs = [bench.PairRecord(i, "dfc", re < 15.0, re, 0.01, 10, time=1.0 + i) for i, re in enumerate((1.0, 20.0, 2.0))]
    s = bench.summarize("dfc", recs)
    assert s.n_success == 2 and round(100 * s.rr, 1) == 66.7
    assert s.mean_re_deg == pytest.approx(1.5) and s.median_time == 2.0
    failed = bench.PairRecord(3, "dfc", False, None, None, None, "Boom: x")
    s = bench.summarize("dfc", recs + [failed])
    assert s.rr == 0.5 and s.mean_re_deg == pytest.approx(1.5)


def test_method_names():
    assert bench.canonical_method("ransac-1k") == "ransac_1000"
    assert bench.canonical_method("RANSAC_250") == "ransac_250"
    assert bench.canonical_method("dfc-v1") == "dfc_v1"
    for bad in ("ransac", "ransac-0", "fgr"):
        with pytest.raises(ValueError):
            bench.canonical_method(bad)


def test_profiles():
    ind = bench.profile("indoor")
    assert (ind.voxel, ind.tau, ind.re_max_deg, ind.te_max) == (0.05, 0.10, 15.0, 0.30)
    out = bench.profile("outdoor", seed=3)
    assert (out.voxel, out.tau, out.re_max_deg, out.te_max, out.seed) == (0.30, 0.60, 5.0, 0.60, 3)
    syn = bench.profile("synthetic")
    assert (syn.tau, syn.n_s, syn.subset_k, syn.sigma2) == (0.05, 200, 40, 1.0)
    with pytest.raises(ValueError):
        bench.profile("lab")
    with pytest.raises(ValueError):
        bench.RegistrationConfig(tau=0.0)
    with pytest.raises(ValueError):
        bench.RegistrationConfig(verify_scope="members")


def test_backend_mismatch(ckpt):
    src, dst, gt = clean_scene(3)
    with pytest.raises(ShapeMismatch):
        bench.register_pair(src, dst, bench.RegistrationConfig(backend="pointnet_like"), checkpoint=ckpt, gt=gt)


def test_subset_scope_runs(ckpt):
    src, dst, gt = clean_scene(4)
    cfg = bench.RegistrationConfig(n_s=30, subset_k=20, verify_scope="subset")
    res = bench.register_pair(src, dst, cfg, checkpoint=ckpt, gt=gt)
    assert res.success and res.diagnostics["best_inliers"] == 20


def test_transform_and_manifest_io(tmp_path):
    tf = random_transform(np.random.default_rng(5))
    p = tmp_path / "gt.txt"
    bench.write_transform(tf, p)
    assert np.array_equal(bench.read_transform(p).as_matrix(), tf.as_matrix())
    assert p.read_text().splitlines()[-1].split() == ["0", "0", "0", "1"]
    m = tmp_path / "m.csv"
    m.write_text("src,dst,gt\n# comment\na.ply,b.ply,g.txt\nc.ply,d.ply\n")
    specs = bench.read_manifest(m)
    assert [(s.index, s.src_path, s.gt_path) for s in specs] == [(0, "a.ply", "g.txt"), (1, "c.ply", None)]
    bad = tmp_path / "bad.txt"
    bad.write_text("1 0 0\n0 1 0\n0 0 1\n")
    with pytest.raises(ShapeMismatch):
        bench.read_transform(bad)


def manifest_suite(tmp_path):
    # a small motion so that ICP from the identity also converges
    tf = RigidTransform(axis_angle_matrix([1, 2, 3], np.radians(2.0)), [0.01, -0.005, 0.0])
    src, dst, _ = clean_scene(6, 500, tf)
    cloud.save(src, tmp_path / "s.ply")
    cloud.save(dst, tmp_path / "d.ply")
    bench.write_transform(tf, tmp_path / "gt.txt")
    m = tmp_path / "m.csv"
    m.write_text(f"{tmp_path / 's.ply'},{tmp_path / 'd.ply'},{tmp_path / 'gt.txt'}\n"
                 f"{tmp_path / 'missing.ply'},{tmp_path / 'd.ply'},{tmp_path / 'gt.txt'}\n")
    return bench.read_manifest(m)


def test_single_clean_pair_all_methods(tmp_path, ckpt):
    specs = manifest_suite(tmp_path)
    rep = bench.run_suite(specs[:1], bench.RegistrationConfig(), ["dfc", "dfc_v1", "icp_only", "ransac-200"],
                          checkpoint=ckpt)
    assert all(s.rr == 1.0 for s in rep.summaries.values())


def test_failed_pair_is_recorded(tmp_path, ckpt):
    rep = bench.run_suite(manifest_suite(tmp_path), bench.RegistrationConfig(), ["ransac-100"], checkpoint=ckpt)
    recs = rep.records["ransac_100"]
    assert recs[0].success and recs[1].success is False and "missing.ply" in recs[1].error
    assert rep.summaries["ransac_100"].rr == 0.5


def test_suite_determinism_across_threads(ckpt, tmp_path):
    suite = bench.SyntheticSuite(n_points=300, outlier_ratio=0.5)
    cfg = bench.RegistrationConfig(n_s=40, subset_k=20)
    a = bench.run_suite(4, cfg, ["dfc_v1", "ransac-100"], ckpt, threads=1, suite=suite)
    b = bench.run_suite(4, cfg, ["dfc_v1", "ransac-100"], ckpt, threads=3, suite=suite)
    assert json.dumps(a.to_json_dict(), sort_keys=True) == json.dumps(b.to_json_dict(), sort_keys=True)
    paths = bench.write_report(a, tmp_path)
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert rows[0].startswith("method,rr_percent") and len(rows) == 3
    assert "time" in json.load(open(paths["timing"]))["pairs"]["dfc_v1"][0]
    assert "time" not in json.load(open(paths["json"]))["pairs"]["dfc_v1"][0]


def test_calibrated_noise_hits_outlier_ratio():
    noise = bench.calibrate_oracle_noise(0.7, 1000, 32)
    miss = bench._nn_miss_rate(noise, 1000, 32, trials=8, seed=777)
    assert abs(miss - 0.7) < 0.03
    assert bench.calibrate_oracle_noise(0.0, 1000, 32) == 0.0
