"""Command-line driver: register, benchmark, train, selfcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 pipeline failure
(or a failing self-check).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import bench, checkpoint as ckptmod, selfcheck, training
from .cloud import load as load_cloud
from .errors import DfcError

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config handling


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def collect_settings(config_path, overrides) -> dict:
    """JSON file (flat or nested) then KEY=VALUE overrides, as a flat dotted dict."""
    settings = {}
    if config_path:
        try:
            with open(config_path) as fh:
                settings.update(_flatten(json.load(fh)))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        settings[k.strip()] = _parse_value(v.strip())
    return settings


def build_dataclass(cls, base, settings: dict, namespace: str, default_ns: bool = True):
    """Apply the settings addressed to ``namespace`` onto ``base``; unknown keys are errors."""
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, val in settings.items():
        ns, _, field = key.rpartition(".")
        if ns == namespace or (ns == "" and default_ns):
            if field not in names:
                raise UsageError(f"unknown {namespace} setting {field!r}; valid: {', '.join(sorted(names))}")
            kw[field] = tuple(val) if isinstance(val, list) else val
    try:
        return dataclasses.replace(base, **kw) if base is not None else cls(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {namespace} settings: {exc}") from None


def _check_namespaces(settings, allowed):
    for key in settings:
        ns = key.rpartition(".")[0]
        if ns and ns not in allowed:
            raise UsageError(f"unknown setting namespace {ns!r} in {key!r}; valid: {', '.join(allowed)}")


def _registration_config(args, settings):
    try:
        base = bench.profile(args.profile)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = build_dataclass(bench.RegistrationConfig, base, settings, "registration")
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _checkpoint(path):
    if path is None:
        return ckptmod.load_default()
    try:
        return ckptmod.load(path)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- subcommands


def cmd_register(args) -> int:
    settings = collect_settings(args.config, args.set)
    _check_namespaces(settings, ("registration",))
    cfg = _registration_config(args, settings)
    if args.icp:
        cfg = cfg.replace(icp=True)
    for p in (args.src, args.dst, args.gt):
        if p is not None and not os.path.exists(p):
            raise UsageError(f"no such file: {p}")
    ckpt = _checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    try:
        src = load_cloud(args.src)
        dst = load_cloud(args.dst)
        gt = bench.read_transform(args.gt) if args.gt else None
        res = bench.register_pair(src, dst, cfg, checkpoint=ckpt, gt=gt)
    except (DfcError, ValueError) as exc:
        stage = getattr(exc, "stage", None)
        print(f"registration failed{f' in stage {stage}' if stage else ''}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        _write_json(os.path.join(args.out, "diagnostics.json"),
                    {"schema_version": bench.SCHEMA_VERSION, "ok": False, "stage": stage,
                     "error": f"{type(exc).__name__}: {exc}"})
        return EXIT_FAIL
    bench.write_transform(res.transform, os.path.join(args.out, "transform.txt"))
    diag = {
        "schema_version": bench.SCHEMA_VERSION,
        "ok": True,
        "transform": res.transform.as_matrix().tolist(),
        "inliers": int(res.inlier_mask.sum()),
        "n_correspondences": int(len(res.inlier_mask)),
        "stage_times": res.stage_times,
        "total_time": res.total_time,
        "diagnostics": {k: v for k, v in res.diagnostics.items()},
        "config": dataclasses.asdict(cfg),
    }
    if res.pose is not None:
        diag.update(re_deg=res.pose.re_deg, te=res.pose.te, success=res.success)
    _write_json(os.path.join(args.out, "diagnostics.json"), diag)
    msg = f"inliers {diag['inliers']}/{diag['n_correspondences']}"
    if res.pose is not None:
        msg += f"  RE {res.pose.re_deg:.4f} deg  TE {res.pose.te:.5f}  success {res.success}"
    print(msg)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    settings = collect_settings(args.config, args.set)
    _check_namespaces(settings, ("registration", "suite"))
    cfg = _registration_config(args, settings)
    try:
        methods = [bench.canonical_method(m) for m in args.methods.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not methods:
        raise UsageError(f"no methods given; valid: {bench.METHOD_HELP}")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    ckpt = _checkpoint(args.checkpoint)
    if args.suite == "synthetic":
        suite = build_dataclass(bench.SyntheticSuite, bench.SyntheticSuite(), settings, "suite", default_ns=False)
        suite = dataclasses.replace(suite, seed=args.seed if args.seed is not None else suite.seed)
        if args.outliers is not None:
            suite = dataclasses.replace(suite, outlier_ratio=args.outliers)
        pairs = args.pairs if args.pairs is not None else suite.n_pairs
        if pairs < 1:
            raise UsageError("--pairs must be >= 1")
        report = bench.run_suite(pairs, cfg, methods, ckpt, args.threads, suite)
    else:
        if not os.path.exists(args.suite):
            raise UsageError(f"no such manifest: {args.suite}")
        try:
            specs = bench.read_manifest(args.suite)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if args.pairs is not None:
            specs = specs[: args.pairs]
        report = bench.run_suite(specs, cfg, methods, ckpt, args.threads)
    paths = bench.write_report(report, args.out)
    print(report.format_table())
    print(f"report: {paths['json']}")
    return EXIT_OK


def cmd_train(args) -> int:
    settings = collect_settings(args.config, args.set)
    _check_namespaces(settings, ("train",))
    cfg = build_dataclass(training.TrainConfig, training.TrainConfig(), settings, "train")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)

    def progress(r):
        print(f"epoch {r.epoch:3d}  l_c {r.l_c:.5f}  l_t {r.l_t:.4f}  total {r.total:.5f}", flush=True)

    try:
        res = training.train(cfg, os.path.join(args.out, "trace.csv"), progress)
    except DfcError as exc:
        print(f"training failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ckptmod.save(res.checkpoint, os.path.join(args.out, "checkpoint.json"))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = selfcheck.run_all(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:26s} {r.detail}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"failing checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfcreg", description="Correspondence-based rigid registration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, profile=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int)
        if profile:
            sp.add_argument("--profile", default="synthetic", help="synthetic, indoor or outdoor")
            sp.add_argument("--checkpoint", help="checkpoint JSON (default: shipped desk checkpoint)")

    r = sub.add_parser("register", help="register one pair of clouds")
    r.add_argument("--src", required=True)
    r.add_argument("--dst", required=True)
    r.add_argument("--gt", help="4x4 ground-truth transform file")
    r.add_argument("--icp", action="store_true", help="refine with ICP")
    r.add_argument("--out", required=True, help="output directory")
    common(r)
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("benchmark", help="run a benchmark suite")
    b.add_argument("--suite", default="synthetic", help="'synthetic' or a manifest CSV")
    b.add_argument("--methods", default="dfc,dfc_v1,ransac-1k", help=bench.METHOD_HELP)
    b.add_argument("--pairs", type=int)
    b.add_argument("--outliers", type=float, help="target correspondence outlier ratio (synthetic)")
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--out", required=True)
    common(b)
    b.set_defaults(func=cmd_benchmark)

    t = sub.add_parser("train", help="train the embedding and weighting networks")
    t.add_argument("--out", required=True)
    common(t, profile=False)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("selfcheck", help="run the embedded oracle checks")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dfcreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
