"""Cleaning chain turning raw clouds into registration-ready inputs.

Every operation here only drops (or subsamples) points; nothing is moved.
The target-side pipeline is budgeted for real-time use on a single worker.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import PreprocessError
from .geometry import FloatArray, PointCloud, random_subsample
from .ingest import DepthFrame, reproject_depth

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class PlaneModel:
    """Plane {p : normal . p + offset = 0} with its supporting inlier count."""

    normal: FloatArray
    offset: float
    inlier_count: int

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        n = n.copy()
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal + self.offset)


@dataclass(frozen=True)
class PreprocessParams:
    """Defaults for the full source/target cleaning chain (lengths in meters)."""

    clamp_min: float = 0.25
    clamp_max: float = 1.5
    plane_dist: float = 0.01
    plane_iters: int = 100
    plane_min_fraction: float = 0.20  # skip table removal below this inlier share
    outlier_radius: float = 0.02
    outlier_min_neighbors: int = 3
    crop_z_frac: float = 0.10
    crop_y_frac: float = 0.35
    subsample_n: int = 10000
    seed: int = 0
    crop_after_subsample: bool = False  # True restores subsample-first ordering

    def __post_init__(self):
        if not (0 <= self.clamp_min < self.clamp_max):
            raise ValueError("need 0 <= clamp_min < clamp_max")
        for name in ("plane_dist", "outlier_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("crop_z_frac", "crop_y_frac"):
            v = getattr(self, name)
            if not (0 <= v < 0.5):
                raise ValueError(f"{name} must be in [0, 0.5)")
        if self.subsample_n < 1:
            raise ValueError("subsample_n must be >= 1")
        if self.plane_iters < 1:
            raise ValueError("plane_iters must be >= 1")
        if self.outlier_min_neighbors < 0:
            raise ValueError("outlier_min_neighbors must be >= 0")


def clamp_range(cloud: PointCloud, min_m: float, max_m: float) -> PointCloud:
    """Keep points whose range from the origin lies in [min_m, max_m]."""
    if not (0 <= min_m < max_m):
        raise ValueError("need 0 <= min_m < max_m")
    return cloud.select(np.nonzero(_range_mask(cloud.points, min_m, max_m))[0])


def _range_mask(points: np.ndarray, min_m: float, max_m: float) -> np.ndarray:
    r = np.linalg.norm(points, axis=1)
    return (r >= min_m) & (r <= max_m)


def fit_plane_ransac(
    cloud: PointCloud, dist: float, iters: int, seed: int
) -> PlaneModel:
    """Best 3-point plane by inlier count, then least-squares refit on inliers."""
    pts = cloud.points
    n = len(pts)
    if n < 3:
        raise ValueError(f"plane fit needs >= 3 points, got {n}")
    if dist <= 0 or iters < 1:
        raise ValueError("dist must be > 0 and iters >= 1")
    rng = np.random.default_rng(seed)

    idx = rng.integers(0, n, size=(iters, 3))
    while True:
        dup = (
            (idx[:, 0] == idx[:, 1])
            | (idx[:, 0] == idx[:, 2])
            | (idx[:, 1] == idx[:, 2])
        )
        if not dup.any():
            break
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), 3))

    a, b, c = pts[idx[:, 0]], pts[idx[:, 1]], pts[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    lengths = np.linalg.norm(normals, axis=1)
    valid = lengths > 1e-12
    if not valid.any():
        raise ValueError("degenerate plane fit: sampled points are collinear")
    normals = normals[valid] / lengths[valid, None]
    offsets = -np.einsum("ij,ij->i", normals, a[valid])

    # score all hypotheses at once: |P n^T + d| <= dist
    distances = np.abs(pts @ normals.T + offsets)
    counts = (distances <= dist).sum(axis=0)
    best = int(np.argmax(counts))
    if counts[best] < 3:
        raise ValueError("degenerate plane fit: no hypothesis gained support")

    inliers = pts[distances[:, best] <= dist]
    centroid = inliers.mean(axis=0)
    _, sv, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    if sv[1] < 1e-12:
        raise ValueError("degenerate plane fit: inliers are collinear")
    normal = vt[-1]
    # deterministic sign: dominant component positive
    if normal[int(np.argmax(np.abs(normal)))] < 0:
        normal = -normal
    offset = -float(normal @ centroid)
    final_count = int((np.abs(pts @ normal + offset) <= dist).sum())
    return PlaneModel(normal, offset, final_count)


def remove_plane(cloud: PointCloud, model: PlaneModel, dist: float) -> PointCloud:
    """Drop points within dist of the plane."""
    keep = model.distances(cloud.points) > dist
    return cloud.select(np.nonzero(keep)[0])


def remove_sparse_outliers(
    cloud: PointCloud, radius: float, min_neighbors: int
) -> PointCloud:
    """Keep points with at least min_neighbors other points within radius."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if min_neighbors <= 0 or len(cloud) == 0:
        return cloud
    return cloud.select(np.nonzero(_dense_mask(cloud.points, radius, min_neighbors))[0])


def _dense_mask(points: np.ndarray, radius: float, min_neighbors: int) -> np.ndarray:
    """Exact density test: >= min_neighbors other points within radius.

    Cheap sufficient test first: with cell size radius/sqrt(3) any two points
    sharing a grid cell are within radius, so a full-enough cell proves
    density. Only the sparse remainder gets an exact k-NN check, which keeps
    the stage inside the real-time frame budget.
    """
    n = len(points)
    if n < min_neighbors + 1:
        return np.zeros(n, dtype=bool)
    cells = np.floor(points / (radius / np.sqrt(3.0))).astype(np.int64)
    cells -= cells.min(axis=0)
    spans = [int(s) for s in cells.max(axis=0) + 1]
    if spans[0] * spans[1] * spans[2] < 2**62:
        keys = (cells[:, 0] * spans[1] + cells[:, 1]) * spans[2] + cells[:, 2]
        _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        mask = counts[inverse] >= min_neighbors + 1
    else:  # degenerate spread; skip the grid shortcut
        mask = np.zeros(n, dtype=bool)

    rest = np.nonzero(~mask)[0]
    if len(rest):
        tree = cKDTree(points, balanced_tree=False, compact_nodes=False)
        d, _ = tree.query(points[rest], k=min_neighbors + 1)
        mask[rest] = d[:, -1] <= radius
    return mask


def crop_percentile(
    cloud: PointCloud, axis: int | str, lo_frac: float, hi_frac: float
) -> PointCloud:
    """Drop the lowest floor(lo*n) and highest floor(hi*n) points on an axis.

    Rank-based (point-count percentile), not bounding-box extent, so outliers
    cannot stretch the crop window. Ties resolve by original index.
    """
    ax = _AXES[axis] if isinstance(axis, str) else int(axis)
    if not (0 <= lo_frac < 1 and 0 <= hi_frac < 1 and lo_frac + hi_frac < 1):
        raise ValueError("fractions must be in [0, 1) and sum below 1")
    n = len(cloud)
    if n == 0:
        return cloud
    n_lo = int(np.floor(lo_frac * n))
    n_hi = int(np.floor(hi_frac * n))
    order = np.argsort(cloud.points[:, ax], kind="stable")
    keep = np.sort(order[n_lo : n - n_hi])
    return cloud.select(keep)


def prepare_source(vol_cloud: PointCloud, params: PreprocessParams) -> PointCloud:
    """Source chain: z-crop both ends, y-crop the back, subsample to budget.

    With crop_after_subsample the subsample runs first (the narrated order);
    the default spends the point budget on retained geometry instead.
    """
    if len(vol_cloud) == 0:
        raise PreprocessError("prepare_source", "input cloud is empty")

    def crop_stages(cloud: PointCloud) -> PointCloud:
        cloud = _nonempty(
            crop_percentile(cloud, "z", params.crop_z_frac, params.crop_z_frac),
            "crop_z",
        )
        return _nonempty(
            crop_percentile(cloud, "y", 0.0, params.crop_y_frac), "crop_y"
        )

    if params.crop_after_subsample:
        cloud = random_subsample(vol_cloud, params.subsample_n, params.seed)
        return crop_stages(cloud)
    cloud = crop_stages(vol_cloud)
    return random_subsample(cloud, params.subsample_n, params.seed)


def _nonempty(cloud: PointCloud, stage: str) -> PointCloud:
    if len(cloud) == 0:
        raise PreprocessError(stage, "stage emptied the cloud")
    return cloud


@dataclass(frozen=True)
class TargetReport:
    """prepare_target output: the cloud plus per-stage accounting.

    kept_indices maps each output point back to the reprojected cloud
    (row-major over valid pixels), which lets callers carry per-pixel
    labels through the pipeline.
    """

    cloud: PointCloud
    stage_counts: dict[str, int]
    plane: PlaneModel | None
    plane_removed: bool
    seconds: float
    kept_indices: np.ndarray

    def as_dict(self) -> dict:
        return {
            "stage_counts": dict(self.stage_counts),
            "plane_removed": self.plane_removed,
            "plane": None
            if self.plane is None
            else {
                "normal": [float(v) for v in self.plane.normal],
                "offset": float(self.plane.offset),
                "inlier_count": self.plane.inlier_count,
            },
            "seconds": self.seconds,
            "points": len(self.cloud),
        }


def prepare_target(frame: DepthFrame, params: PreprocessParams) -> TargetReport:
    """Target chain: reproject, clamp range, drop the support plane, de-speckle."""
    t0 = time.perf_counter()
    cloud = reproject_depth(frame, 0.0, np.inf)
    counts = {"reproject": len(cloud)}
    if len(cloud) == 0:
        raise PreprocessError("reproject", "no valid depth")
    kept = np.arange(len(cloud))

    mask = _range_mask(cloud.points, params.clamp_min, params.clamp_max)
    cloud, kept = cloud.select(np.nonzero(mask)[0]), kept[mask]
    counts["clamp_range"] = len(cloud)
    if len(cloud) == 0:
        raise PreprocessError("clamp_range", "stage emptied the cloud")

    plane = None
    plane_removed = False
    if len(cloud) >= 3:
        # score hypotheses on a strided thinning to stay in the frame budget;
        # the removal mask below still runs over the full cloud
        stride = max(1, len(cloud) // 8000)
        scored = cloud.select(np.arange(0, len(cloud), stride))
        try:
            plane = fit_plane_ransac(
                scored, params.plane_dist, params.plane_iters, params.seed
            )
        except ValueError:
            plane = None  # degenerate scene: proceed without table removal
        if plane is not None and plane.inlier_count >= params.plane_min_fraction * len(scored):
            mask = plane.distances(cloud.points) > params.plane_dist
            cloud, kept = cloud.select(np.nonzero(mask)[0]), kept[mask]
            plane_removed = True
    counts["remove_plane"] = len(cloud)
    if len(cloud) == 0:
        raise PreprocessError("remove_plane", "stage emptied the cloud")

    if params.outlier_min_neighbors > 0:
        mask = _dense_mask(cloud.points, params.outlier_radius, params.outlier_min_neighbors)
        cloud, kept = cloud.select(np.nonzero(mask)[0]), kept[mask]
    counts["remove_sparse_outliers"] = len(cloud)
    if len(cloud) == 0:
        raise PreprocessError("remove_sparse_outliers", "stage emptied the cloud")

    return TargetReport(
        cloud=cloud,
        stage_counts=counts,
        plane=plane,
        plane_removed=plane_removed,
        seconds=time.perf_counter() - t0,
        kept_indices=kept,
    )
