"""Command-line entry point: convert, preprocess, register, synth, benchmark.

Exit codes: 0 success, 1 usage error (bad flags or config), 2 data error
(missing or malformed files, failed registration). Progress and diagnostics
go to stderr; data goes to files or stdout. Every command accepts --config
(JSON), --seed and --json; precedence is flag > config file > default.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .backend import load_backend_bindings
from .errors import CrossRegError
from .evaluation import (
    INTERNAL_METHODS,
    MethodSpec,
    RegistrationConfig,
    SuccessThresholds,
    load_manifest,
    run_benchmark,
)
from .features import FeatureParams
from .geometry import RigidTransform
from .ingest import (
    extract_isosurface_points,
    read_depth_pair,
    read_ply,
    read_volume,
    reproject_depth,
    write_ply,
)
from .preprocess import PreprocessParams, prepare_source, prepare_target
from .registration import (
    DEFAULT_FEATURE_VOXEL,
    IcpParams,
    RansacParams,
    icp,
    load_transform,
    register_global,
    register_global_icp,
    save_transform,
)
from .synth import generate_suite


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _vec3(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 'x,y,z', got {text!r}")
    return tuple(float(p) for p in parts)


def _build_parser() -> _Parser:
    parser = _Parser(prog="crossreg", description=__doc__)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file with parameter sections")
    shared.add_argument("--seed", type=int, default=None, help="global random seed")
    shared.add_argument("--json", dest="json_out", metavar="PATH",
                        help="write a machine-readable summary ('-' for stdout)")
    shared.add_argument("--workers", type=int, default=None,
                        help="worker processes for the benchmark grid")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", parents=[shared], help="depth frame or volume to PLY")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--depth", help="depth frame metadata JSON")
    group.add_argument("--volume", help="scalar volume metadata JSON")
    p.add_argument("--raw", help="raw payload path (default: metadata path with .raw)")
    p.add_argument("--iso", type=float, default=0.0, help="isosurface level for volumes")
    p.add_argument("--min", dest="min_m", type=float, default=0.0)
    p.add_argument("--max", dest="max_m", type=float, default=float("inf"))
    p.add_argument("--out", required=True, help="output PLY")
    p.add_argument("--ascii", action="store_true", help="write ASCII instead of binary")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("preprocess-source", parents=[shared],
                       help="crop and subsample a scan-side cloud")
    p.add_argument("--input", required=True, help="input PLY")
    p.add_argument("--out", required=True, help="output PLY")
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=_cmd_preprocess_source)

    p = sub.add_parser("preprocess-target", parents=[shared],
                       help="reproject and clean a sensor depth frame")
    p.add_argument("--depth", required=True, help="depth frame metadata JSON")
    p.add_argument("--raw", help="raw payload path (default: metadata path with .raw)")
    p.add_argument("--out", required=True, help="output PLY")
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=_cmd_preprocess_target)

    p = sub.add_parser("register", parents=[shared], help="align two PLY clouds")
    p.add_argument("--method", choices=list(INTERNAL_METHODS), default="global-icp")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="transform file (.json or text)")
    p.add_argument("--init", help="initial transform file for icp")
    p.add_argument("--source-viewpoint", type=_vec3, default=None, metavar="X,Y,Z")
    p.add_argument("--target-viewpoint", type=_vec3, default=None, metavar="X,Y,Z")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic suite")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--difficulty", choices=["easy", "paper-like"], default="paper-like")
    p.add_argument("--source-n", type=int, default=40000)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("benchmark", parents=[shared], help="run methods over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="global,global-icp",
                   help="comma-separated internal methods")
    p.add_argument("--backends", help="JSON file of external backend bindings")
    p.add_argument("--csv", help="write per-method summary CSV")
    p.add_argument("--te-thresh", type=float, default=None, help="success TE bound, cm")
    p.add_argument("--re-thresh", type=float, default=None, help="success RE bound, deg")
    p.set_defaults(func=_cmd_benchmark)
    return parser


# --- configuration --------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int
    preprocess: PreprocessParams
    features: FeatureParams
    ransac: RansacParams
    icp: IcpParams
    thresholds: SuccessThresholds
    feature_voxel: float | None
    source_viewpoint: tuple[float, float, float]
    target_viewpoint: tuple[float, float, float]


_SECTIONS = {
    "preprocess": PreprocessParams,
    "features": FeatureParams,
    "ransac": RansacParams,
    "icp": IcpParams,
    "thresholds": SuccessThresholds,
}
_TOP_KEYS = set(_SECTIONS) | {"seed", "feature_voxel", "source_viewpoint", "target_viewpoint"}


def _load_config(args) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a JSON object")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise UsageError(
                f"config {path}: unknown keys {sorted(unknown)}; expected {sorted(_TOP_KEYS)}"
            )

    seed = args.seed if getattr(args, "seed", None) is not None else int(raw.get("seed", 0))

    def build(name, cls, seeded: bool):
        data = dict(raw.get(name, {}))
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise UsageError(
                f"config section '{name}': unknown keys {sorted(unknown)}; expected {sorted(fields)}"
            )
        if seeded and "seed" not in data:
            data["seed"] = seed
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise UsageError(f"config section '{name}': {e}")

    thresholds = build("thresholds", SuccessThresholds, seeded=False)
    if getattr(args, "te_thresh", None) is not None:
        thresholds = dataclasses.replace(thresholds, te_cm=args.te_thresh)
    if getattr(args, "re_thresh", None) is not None:
        thresholds = dataclasses.replace(thresholds, re_deg=args.re_thresh)

    def viewpoint(key, flag):
        if flag is not None:
            return tuple(flag)
        v = raw.get(key, (0.0, 0.0, 0.0))
        if not (isinstance(v, (list, tuple)) and len(v) == 3):
            raise UsageError(f"config key '{key}' must be a list of 3 numbers")
        return tuple(float(x) for x in v)

    return RunConfig(
        seed=seed,
        preprocess=build("preprocess", PreprocessParams, seeded=True),
        features=build("features", FeatureParams, seeded=False),
        ransac=build("ransac", RansacParams, seeded=True),
        icp=build("icp", IcpParams, seeded=False),
        thresholds=thresholds,
        feature_voxel=raw.get("feature_voxel", DEFAULT_FEATURE_VOXEL),
        source_viewpoint=viewpoint("source_viewpoint", getattr(args, "source_viewpoint", None)),
        target_viewpoint=viewpoint("target_viewpoint", getattr(args, "target_viewpoint", None)),
    )


def _emit_summary(args, summary: dict) -> None:
    if getattr(args, "json_out", None):
        text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
        if args.json_out == "-":
            sys.stdout.write(text)
        else:
            Path(args.json_out).write_text(text)


def _default_raw(meta_path: str, explicit: str | None) -> str:
    return explicit if explicit else str(Path(meta_path).with_suffix(".raw"))


# --- commands -------------------------------------------------------------------


def _cmd_convert(args) -> int:
    if args.depth:
        frame = read_depth_pair(args.depth, _default_raw(args.depth, args.raw))
        cloud = reproject_depth(frame, args.min_m, args.max_m)
    else:
        vol = read_volume(args.volume, _default_raw(args.volume, args.raw))
        cloud = extract_isosurface_points(vol, args.iso)
    write_ply(cloud, args.out, binary=not args.ascii)
    print(f"wrote {len(cloud)} points to {args.out}", file=sys.stderr)
    _emit_summary(args, {"points": len(cloud), "out": str(args.out)})
    return 0


def _cmd_preprocess_source(args) -> int:
    cfg = _load_config(args)
    cloud = read_ply(args.input)
    n_in = len(cloud)
    out = prepare_source(cloud, cfg.preprocess)
    write_ply(out, args.out, binary=not args.ascii)
    print(f"{n_in} -> {len(out)} points", file=sys.stderr)
    _emit_summary(args, {"points_in": n_in, "points_out": len(out), "out": str(args.out)})
    return 0


def _cmd_preprocess_target(args) -> int:
    cfg = _load_config(args)
    frame = read_depth_pair(args.depth, _default_raw(args.depth, args.raw))
    report = prepare_target(frame, cfg.preprocess)
    write_ply(report.cloud, args.out, binary=not args.ascii)
    print(
        f"stages {report.stage_counts} in {report.seconds * 1000:.1f} ms",
        file=sys.stderr,
    )
    _emit_summary(args, {**report.as_dict(), "out": str(args.out)})
    return 0


def _cmd_register(args) -> int:
    cfg = _load_config(args)
    source = read_ply(args.source)
    target = read_ply(args.target)
    if args.method == "global":
        result = register_global(
            source, target, cfg.ransac, cfg.features,
            feature_voxel=cfg.feature_voxel,
            source_viewpoint=cfg.source_viewpoint,
            target_viewpoint=cfg.target_viewpoint,
        )
    elif args.method == "icp":
        init = load_transform(args.init) if args.init else RigidTransform.identity()
        result = icp(source, target, init, cfg.icp)
    else:
        result = register_global_icp(
            source, target, cfg.ransac, cfg.icp, cfg.features,
            feature_voxel=cfg.feature_voxel,
            source_viewpoint=cfg.source_viewpoint,
            target_viewpoint=cfg.target_viewpoint,
        )
    save_transform(args.out, result.transform)
    print(
        f"{args.method}: fitness {result.fitness:.3f}, rmse {result.inlier_rmse * 1000:.2f} mm, "
        f"{result.wall_time:.2f} s",
        file=sys.stderr,
    )
    _emit_summary(
        args,
        {
            "method": args.method,
            "fitness": result.fitness,
            "inlier_rmse_m": result.inlier_rmse,
            "iterations": result.iterations,
            "wall_time_s": result.wall_time,
            "stage_times": dict(result.stage_times or {}),
            "out": str(args.out),
        },
    )
    return 0


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    entries, manifest = generate_suite(
        n_subjects=args.subjects,
        views_per_subject=args.views,
        difficulty=args.difficulty,
        seed=cfg.seed,
        out_dir=args.out,
        source_n=args.source_n,
    )
    print(f"wrote {len(entries)} pairs under {args.out}", file=sys.stderr)
    _emit_summary(args, {"pairs": len(entries), "manifest": str(manifest)})
    return 0


def _cmd_benchmark(args) -> int:
    cfg = _load_config(args)
    pairs = load_manifest(args.manifest)
    reg_config = RegistrationConfig(
        ransac=cfg.ransac,
        icp=cfg.icp,
        features=cfg.features,
        feature_voxel=cfg.feature_voxel,
        source_viewpoint=cfg.source_viewpoint,
        target_viewpoint=cfg.target_viewpoint,
    )
    methods = []
    for name in [m.strip() for m in args.methods.split(",") if m.strip()]:
        if name not in INTERNAL_METHODS:
            raise UsageError(f"unknown method '{name}'; expected one of {INTERNAL_METHODS}")
        methods.append(MethodSpec(name=name, kind="internal", config=reg_config))
    if args.backends:
        for binding in load_backend_bindings(args.backends):
            methods.append(MethodSpec(name=binding.name, kind="external", config=binding))
    if not methods:
        raise UsageError("no methods selected")

    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    report = run_benchmark(pairs, methods, thresholds=cfg.thresholds, workers=max(1, workers))
    print(report.text_table())
    if getattr(args, "json_out", None):
        _emit_summary(args, report.to_json_dict())
    if args.csv:
        Path(args.csv).write_text(report.csv_text())
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (CrossRegError, OSError, ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
