"""Measurement protocol: per-pair TE/RE/success/time and aggregate reports.

TE is the Euclidean distance between estimated and ground-truth translations
(reported in cm); RE is the geodesic rotation angle (degrees). A pair counts
as successful when both fall strictly below the thresholds. Error statistics
are computed over successful registrations only; recall and mean time over
all pairs.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import FeatureParams
from .geometry import PointCloud, RigidTransform
from .ingest import read_ply
from .registration import (
    DEFAULT_FEATURE_VOXEL,
    IcpParams,
    RansacParams,
    RegistrationResult,
    icp,
    register_global,
    register_global_icp,
)

INTERNAL_METHODS = ("global", "icp", "global-icp")


@dataclass(frozen=True)
class GroundTruthPose:
    """Source-to-target transform plus where it came from."""

    transform: RigidTransform
    provenance: str = "synthetic"


@dataclass(frozen=True)
class SuccessThresholds:
    te_cm: float = 0.4
    re_deg: float = 15.0

    def __post_init__(self):
        if self.te_cm <= 0 or self.re_deg <= 0:
            raise ValueError("thresholds must be positive")


def translation_error(est: RigidTransform, gt: RigidTransform) -> float:
    """|t_est - t_gt| in centimeters."""
    return float(np.linalg.norm(est.translation - gt.translation) * 100.0)


def rotation_error(est: RigidTransform, gt: RigidTransform) -> float:
    """Geodesic angle between rotations, in degrees."""
    c = (np.trace(est.rotation.T @ gt.rotation) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def is_success(te_cm: float, re_deg: float, thresholds: SuccessThresholds) -> bool:
    """Strictly below both thresholds ("less than", not "at most")."""
    return te_cm < thresholds.te_cm and re_deg < thresholds.re_deg


@dataclass(frozen=True)
class EvalRecord:
    pair_id: str
    method: str
    te_cm: float | None  # None when the method errored
    re_deg: float | None
    success: bool
    wall_time_s: float
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "method": self.method,
            "te_cm": self.te_cm,
            "re_deg": self.re_deg,
            "success": self.success,
            "wall_time_s": self.wall_time_s,
            "error": self.error,
        }


@dataclass(frozen=True)
class MethodStats:
    method: str
    n_pairs: int
    n_success: int
    recall: float
    te_mean_cm: float | None
    te_std_cm: float | None
    re_mean_deg: float | None
    re_std_deg: float | None
    time_mean_s: float

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "n_pairs": self.n_pairs,
            "n_success": self.n_success,
            "recall": self.recall,
            "te_mean_cm": self.te_mean_cm,
            "te_std_cm": self.te_std_cm,
            "re_mean_deg": self.re_mean_deg,
            "re_std_deg": self.re_std_deg,
            "time_mean_s": self.time_mean_s,
        }


@dataclass(frozen=True)
class BenchmarkReport:
    thresholds: SuccessThresholds
    methods: tuple[MethodStats, ...]
    records: tuple[EvalRecord, ...] = field(repr=False, default=())

    def stats_for(self, method: str) -> MethodStats:
        for m in self.methods:
            if m.method == method:
                return m
        raise KeyError(f"no stats for method '{method}'")

    def text_table(self) -> str:
        header = f"{'Method':<14} {'Recall':>7} {'TE (cm)':>16} {'RE (deg)':>16} {'T (s)':>8}"
        lines = [header, "-" * len(header)]
        for m in self.methods:
            te = "-" if m.te_mean_cm is None else f"{m.te_mean_cm:.3f} ± {m.te_std_cm:.3f}"
            re = "-" if m.re_mean_deg is None else f"{m.re_mean_deg:.2f} ± {m.re_std_deg:.2f}"
            lines.append(
                f"{m.method:<14} {m.recall:>7.2f} {te:>16} {re:>16} {m.time_mean_s:>8.2f}"
            )
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "thresholds": {"te_cm": self.thresholds.te_cm, "re_deg": self.thresholds.re_deg},
            "methods": [m.as_dict() for m in self.methods],
            "records": [r.as_dict() for r in self.records],
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["method", "recall", "te_mean_cm", "te_std_cm", "re_mean_deg", "re_std_deg", "time_mean_s"]
        )
        for m in self.methods:
            writer.writerow(
                [
                    m.method,
                    m.recall,
                    "" if m.te_mean_cm is None else m.te_mean_cm,
                    "" if m.te_std_cm is None else m.te_std_cm,
                    "" if m.re_mean_deg is None else m.re_mean_deg,
                    "" if m.re_std_deg is None else m.re_std_deg,
                    m.time_mean_s,
                ]
            )
        return buf.getvalue()


def aggregate(
    records,
    thresholds: SuccessThresholds | None = None,
) -> BenchmarkReport:
    """Reduce per-pair records into per-method statistics.

    With explicit thresholds the success flags are recomputed from the raw
    TE/RE values (errored records stay failures); otherwise the stored
    flags stand. Order of the input records does not matter.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    if thresholds is not None:
        records = [
            replace(
                r,
                success=(
                    r.te_cm is not None
                    and r.re_deg is not None
                    and is_success(r.te_cm, r.re_deg, thresholds)
                ),
            )
            for r in records
        ]
    else:
        thresholds = SuccessThresholds()

    methods: dict[str, list[EvalRecord]] = {}
    for r in sorted(records, key=lambda r: (r.method, r.pair_id)):
        methods.setdefault(r.method, []).append(r)

    stats = []
    for name, rs in sorted(methods.items()):
        wins = [r for r in rs if r.success]
        te = np.array([r.te_cm for r in wins], dtype=np.float64)
        re_ = np.array([r.re_deg for r in wins], dtype=np.float64)
        stats.append(
            MethodStats(
                method=name,
                n_pairs=len(rs),
                n_success=len(wins),
                recall=len(wins) / len(rs),
                te_mean_cm=float(te.mean()) if len(wins) else None,
                te_std_cm=float(te.std()) if len(wins) else None,
                re_mean_deg=float(re_.mean()) if len(wins) else None,
                re_std_deg=float(re_.std()) if len(wins) else None,
                time_mean_s=float(np.mean([r.wall_time_s for r in rs])),
            )
        )
    return BenchmarkReport(thresholds=thresholds, methods=tuple(stats), records=tuple(records))


# --- benchmark grid -------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkPair:
    pair_id: str
    source_ply: str
    target_ply: str
    gt: GroundTruthPose


def load_manifest(path) -> list[BenchmarkPair]:
    """Read a pair manifest: a JSON list of {source_ply, target_ply, gt_transform}."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    base = path.parent
    pairs = []
    for k, e in enumerate(entries):
        try:
            gt = RigidTransform.from_matrix(np.asarray(e["gt_transform"], dtype=np.float64))
            pairs.append(
                BenchmarkPair(
                    pair_id=str(e.get("id", k)),
                    source_ply=str(base / e["source_ply"]),
                    target_ply=str(base / e["target_ply"]),
                    gt=GroundTruthPose(gt, str(e.get("provenance", "synthetic"))),
                )
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f"{path}: bad manifest entry {k}: {err}") from None
    return pairs


@dataclass(frozen=True)
class RegistrationConfig:
    """Everything an internal method needs, picklable for worker processes."""

    ransac: RansacParams = RansacParams()
    icp: IcpParams = IcpParams()
    features: FeatureParams = FeatureParams()
    feature_voxel: float | None = DEFAULT_FEATURE_VOXEL
    source_viewpoint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    target_viewpoint: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class MethodSpec:
    """A method under benchmark: a built-in pipeline or an external backend."""

    name: str
    kind: str  # "internal" | "external"
    config: object  # RegistrationConfig | BackendBinding

    def __post_init__(self):
        if self.kind not in ("internal", "external"):
            raise ValueError(f"unknown method kind '{self.kind}'")
        if self.kind == "internal" and self.name not in INTERNAL_METHODS:
            raise ValueError(
                f"unknown internal method '{self.name}', expected one of {INTERNAL_METHODS}"
            )


def run_internal_method(
    name: str, source: PointCloud, target: PointCloud, config: RegistrationConfig
) -> RegistrationResult:
    if name == "global":
        return register_global(
            source,
            target,
            config.ransac,
            config.features,
            feature_voxel=config.feature_voxel,
            source_viewpoint=config.source_viewpoint,
            target_viewpoint=config.target_viewpoint,
        )
    if name == "icp":
        return icp(source, target, RigidTransform.identity(), config.icp)
    if name == "global-icp":
        return register_global_icp(
            source,
            target,
            config.ransac,
            config.icp,
            config.features,
            feature_voxel=config.feature_voxel,
            source_viewpoint=config.source_viewpoint,
            target_viewpoint=config.target_viewpoint,
        )
    raise ValueError(f"unknown internal method '{name}'")


def _evaluate_task(args) -> EvalRecord:
    pair, method, thresholds = args
    start = time.perf_counter()
    try:
        if method.kind == "internal":
            source = read_ply(pair.source_ply)
            target = read_ply(pair.target_ply)
            result = run_internal_method(method.name, source, target, method.config)
        else:
            from .backend import register_external

            result = register_external(
                method.config, pair.source_ply, pair.target_ply, request_id=pair.pair_id
            )
        te = translation_error(result.transform, pair.gt.transform)
        re_ = rotation_error(result.transform, pair.gt.transform)
        return EvalRecord(
            pair_id=pair.pair_id,
            method=method.name,
            te_cm=te,
            re_deg=re_,
            success=is_success(te, re_, thresholds),
            wall_time_s=result.wall_time,
        )
    except Exception as e:  # a method failure must never abort the run
        return EvalRecord(
            pair_id=pair.pair_id,
            method=method.name,
            te_cm=None,
            re_deg=None,
            success=False,
            wall_time_s=time.perf_counter() - start,
            error=f"{type(e).__name__}: {e}",
        )


def run_benchmark(
    pairs,
    methods,
    thresholds: SuccessThresholds = SuccessThresholds(),
    workers: int = 1,
) -> BenchmarkReport:
    """Apply every method to every pair and aggregate the records.

    Pairs are registered as stored (identical preprocessing for all
    methods). The grid may fan out over worker processes; the reduction is
    a deterministic sort, so the schedule cannot change the report.
    """
    pairs = list(pairs)
    methods = list(methods)
    if not pairs or not methods:
        raise ValueError("need at least one pair and one method")
    tasks = [(pair, method, thresholds) for method in methods for pair in pairs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_evaluate_task, tasks))
    else:
        records = [_evaluate_task(t) for t in tasks]
    report = aggregate(records)
    return BenchmarkReport(thresholds=thresholds, methods=report.methods, records=report.records)
