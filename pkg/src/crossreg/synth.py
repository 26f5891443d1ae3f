"""Synthetic cross-source registration pairs with exact ground truth.

A pair couples a dense sampling of a subject surface in its own frame (the
"scan-like" source) with a simulated depth-camera view of the posed subject
(the "sensor-like" target), optionally resting above a table plane, with
Gaussian depth noise, dropout and outlier pixels. Per-pixel class labels
(subject / table / outlier) ride along so preprocessing stages can be
validated against known scene composition.

Subject local frame convention: +z is head-up, +y points out the back of
the head, so the face looks along -y. The default camera sits at the origin
looking along +z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .evaluation import GroundTruthPose
from .geometry import PointCloud, RigidTransform, random_subsample, rotation_about
from .ingest import CameraIntrinsics, DepthFrame, write_depth_pair, write_ply
from .preprocess import PreprocessParams, prepare_source, prepare_target

LABEL_INVALID = -1
LABEL_SUBJECT = 0
LABEL_TABLE = 1
LABEL_OUTLIER = 2

# local y -> world +z (back of head away from camera), local z -> world +y
_BASE_ROTATION = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

DEFAULT_INTRINSICS = CameraIntrinsics(
    width=512, height=512, fx=450.0, fy=450.0, cx=255.5, cy=255.5, depth_scale=0.001
)


# --- implicit subjects --------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        # scaled-space approximation, exact for spheres, sign-correct always
        inv_r = 1.0 / np.asarray(self.radii)
        q = (p - np.asarray(self.center)) * inv_r
        k0 = np.sqrt(np.einsum("...i,...i->...", q, q))
        q *= inv_r
        k1 = np.sqrt(np.einsum("...i,...i->...", q, q))
        return np.where(k1 > 1e-12, k0 * (k0 - 1.0) / np.maximum(k1, 1e-12), -min(self.radii))


def _smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1.0 - h) + a * h - k * h * (1.0 - h)


@dataclass(frozen=True)
class HeadShape:
    """Head-like composite: cranium and jaw blended with nose, brow, chin
    and cheek bumps. The facial relief is what gives local descriptors
    enough contrast; the cheeks are sized asymmetrically so no rigid motion
    maps the shape onto itself."""

    parts: tuple[Ellipsoid, ...]
    blend: float = 0.012

    @staticmethod
    def default() -> "HeadShape":
        return HeadShape(
            parts=(
                Ellipsoid((0.0, 0.010, 0.030), (0.075, 0.090, 0.100)),  # cranium
                Ellipsoid((0.0, -0.015, -0.055), (0.060, 0.075, 0.075)),  # jaw
                Ellipsoid((0.0, -0.094, -0.012), (0.014, 0.032, 0.024)),  # nose
                Ellipsoid((0.0, -0.078, 0.030), (0.044, 0.024, 0.017)),  # brow
                Ellipsoid((0.0, -0.060, -0.098), (0.024, 0.030, 0.024)),  # chin
                Ellipsoid((-0.046, -0.062, -0.022), (0.022, 0.028, 0.024)),  # cheeks
                Ellipsoid((0.046, -0.062, -0.022), (0.022, 0.028, 0.024)),
            )
        )

    @staticmethod
    def randomized(rng: np.random.Generator) -> "HeadShape":
        base = HeadShape.default()
        side = rng.choice([-1.0, 1.0])
        parts = []
        for k, e in enumerate(base.parts):
            c = np.asarray(e.center) + rng.uniform(-0.006, 0.006, 3)
            r = np.asarray(e.radii) * (1.0 + rng.uniform(-0.15, 0.15, 3))
            if k >= 5:  # cheek pair: keep sides, break the symmetry
                c[0] = np.sign(e.center[0]) * abs(c[0])
                r *= 1.2 if np.sign(e.center[0]) == side else 0.85
            parts.append(Ellipsoid(tuple(c), tuple(r)))
        return HeadShape(tuple(parts))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        f = self.parts[0].sdf(p)
        for e in self.parts[1:]:
            f = _smooth_min(f, e.sdf(p), self.blend)
        return f

    def bound(self) -> tuple[np.ndarray, float]:
        centers = np.array([e.center for e in self.parts])
        radii = np.array([max(e.radii) for e in self.parts])
        c = centers.mean(axis=0)
        r = float((np.linalg.norm(centers - c, axis=1) + radii).max() + 0.02)
        return c, r


@dataclass(frozen=True)
class SphereShape:
    radius: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def bound(self) -> tuple[np.ndarray, float]:
        return np.asarray(self.center, dtype=np.float64), self.radius + 0.01


def sample_surface(shape, n: int, seed: int) -> PointCloud:
    """Dense surface sampling of an implicit subject, with outward normals.

    Rays are cast inward from the bounding sphere toward its center; the
    first zero crossing is refined by bisection, so samples sit on the
    outermost surface to full float precision.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    center, radius = shape.bound()

    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = center + radius * dirs
    # march toward the center; the center is interior, so f changes sign
    steps = max(int(radius / 0.002), 32)
    ts = np.linspace(0.0, radius, steps)
    t_lo = np.zeros(n)
    t_hi = np.full(n, np.nan)
    prev_t = np.zeros(n)
    undecided = np.ones(n, dtype=bool)
    for t in ts[1:]:
        p = origins[undecided] - t * dirs[undecided]
        neg = shape.sdf(p) < 0
        sel = np.nonzero(undecided)[0]
        hit = sel[neg]
        t_lo[hit] = prev_t[hit]
        t_hi[hit] = t
        undecided[hit] = False
        prev_t[sel[~neg]] = t
        if not undecided.any():
            break
    ok = ~np.isnan(t_hi)
    lo, hi = t_lo[ok], t_hi[ok]
    o, d = origins[ok], dirs[ok]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        inside = shape.sdf(o - mid[:, None] * d) < 0
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
    t_star = 0.5 * (lo + hi)
    pts = o - t_star[:, None] * d
    return PointCloud(pts, _implicit_normals(shape, pts))


def _implicit_normals(shape, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(pts)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        g[:, ax] = shape.sdf(pts + e) - shape.sdf(pts - e)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.maximum(norms, 1e-30)


# --- scene description ----------------------------------------------------------


@dataclass(frozen=True)
class TableSpec:
    z: float  # world z of the plane
    half_extent: float = 0.15
    center_xy: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0  # meters, Gaussian depth noise
    outliers: int = 0  # pixels overwritten with random valid depths
    dropout: float = 0.0  # probability a valid pixel is zeroed

    def __post_init__(self):
        if self.sigma < 0 or not (0 <= self.dropout <= 1) or self.outliers < 0:
            raise ValueError("invalid noise specification")


@dataclass(frozen=True)
class SceneSpec:
    subject: object  # HeadShape | SphereShape | PointCloud
    subject_pose: RigidTransform
    camera: CameraIntrinsics = DEFAULT_INTRINSICS
    camera_pose: RigidTransform = RigidTransform.identity()
    table: TableSpec | None = None
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0


@dataclass(frozen=True)
class SynthPair:
    source: PointCloud
    frame: DepthFrame
    gt: GroundTruthPose
    labels: np.ndarray  # per valid pixel, row-major; LABEL_* codes


def _pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us, float)],
        axis=-1,
    ).reshape(-1, 3)


def _trace_implicit(sdf, origin, dirs, t0, t1):
    """First root of sdf along origin + t * dirs within [t0, t1], else inf.

    Conservative sphere tracing finds a sign-change bracket, bisection
    refines it; tolerant of approximate (non-metric) distance fields.
    """
    n = len(dirs)
    speed = np.linalg.norm(dirs, axis=1)
    t = t0.copy()
    t_last_pos = t0.copy()
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    active = t <= t1
    for _ in range(512):
        if not active.any():
            break
        sel = np.nonzero(active)[0]
        p = origin + t[sel, None] * dirs[sel]
        f = sdf(p)
        neg = f < 0
        found = sel[neg]
        lo[found] = t_last_pos[found]
        hi[found] = t[found]
        active[found] = False
        pos = sel[~neg]
        t_last_pos[pos] = t[pos]
        step = np.maximum(0.6 * f[~neg] / speed[pos], 2e-4)
        t[pos] = t[pos] + step
        over = pos[t[pos] > t1[pos]]
        active[over] = False
    found = ~np.isnan(hi)
    if found.any():
        sel = np.nonzero(found)[0]
        a, b = lo[sel], hi[sel]
        o, d = origin, dirs[sel]
        for _ in range(36):
            mid = 0.5 * (a + b)
            inside = sdf(o + mid[:, None] * d) < 0
            b = np.where(inside, mid, b)
            a = np.where(inside, a, mid)
        out = np.full(n, np.inf)
        out[sel] = 0.5 * (a + b)
        return out
    return np.full(n, np.inf)


def _render_geometry(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless z-buffer (meters) and label image for the scene."""
    intr = scene.camera
    h, w = intr.height, intr.width
    rays_cam = _pixel_rays(intr)
    cam_rot = scene.camera_pose.rotation
    origin = scene.camera_pose.translation
    dirs = rays_cam @ cam_rot.T  # ray parameter t equals camera-frame depth

    zbuf = np.full(h * w, np.inf)
    labels = np.full(h * w, LABEL_INVALID, dtype=np.int8)

    subject = scene.subject
    if isinstance(subject, PointCloud):
        z_subj = _splat_points(scene, subject)
    else:
        world_to_local = scene.subject_pose.invert()

        def sdf_world(p):
            return subject.sdf(world_to_local.apply_points(p))

        c_local, r_bound = subject.bound()
        c_world = scene.subject_pose.apply_points(c_local[None])[0]
        # restrict marching to rays that pierce the bounding sphere
        oc = origin - c_world
        b = np.einsum("ij,j->i", dirs, oc)
        a = np.einsum("ij,ij->i", dirs, dirs)
        disc = b * b - a * (oc @ oc - r_bound**2)
        hit = disc > 0
        z_subj = np.full(h * w, np.inf)
        if hit.any():
            sq = np.sqrt(disc[hit])
            t_in = np.maximum((-b[hit] - sq) / a[hit], 1e-3)
            t_out = (-b[hit] + sq) / a[hit]
            valid = t_out > 0
            idx = np.nonzero(hit)[0][valid]
            z_subj[idx] = _trace_implicit(
                sdf_world, origin, dirs[idx], t_in[valid], t_out[valid]
            )
    subj_vis = np.isfinite(z_subj)
    if not subj_vis.any():
        raise ValueError("subject entirely outside camera frustum")
    zbuf[subj_vis] = z_subj[subj_vis]
    labels[subj_vis] = LABEL_SUBJECT

    if scene.table is not None:
        tz = scene.table.z
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_tab = (tz - origin[2]) / dz
        px = origin[0] + t_tab * dirs[:, 0]
        py = origin[1] + t_tab * dirs[:, 1]
        cx, cy = scene.table.center_xy
        on = (
            (dz > 1e-9)
            & (t_tab > 0)
            & (np.abs(px - cx) <= scene.table.half_extent)
            & (np.abs(py - cy) <= scene.table.half_extent)
            & (t_tab < zbuf)
        )
        zbuf[on] = t_tab[on]
        labels[on] = LABEL_TABLE
    return zbuf.reshape(h, w), labels.reshape(h, w)


def _splat_points(scene: SceneSpec, cloud: PointCloud) -> np.ndarray:
    intr = scene.camera
    h, w = intr.height, intr.width
    world = scene.subject_pose.apply_points(cloud.points)
    cam = scene.camera_pose.invert().apply_points(world)
    z = cam[:, 2]
    front = z > 1e-6
    u = np.rint(cam[front, 0] / z[front] * intr.fx + intr.cx).astype(np.int64)
    v = np.rint(cam[front, 1] / z[front] * intr.fy + intr.cy).astype(np.int64)
    zf = z[front]
    zbuf = np.full(h * w, np.inf)
    for du in (-1, 0, 1):  # splat radius: one pixel
        for dv in (-1, 0, 1):
            uu, vv = u + du, v + dv
            ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            np.minimum.at(zbuf, vv[ok] * w + uu[ok], zf[ok])
    return zbuf


def render_depth(scene: SceneSpec, return_labels: bool = False):
    """Render the scene to a quantized depth frame (deterministic per seed).

    Applies, in order: Gaussian depth noise, quantization to uint16 via
    depth_scale, dropout, then outlier pixels at uniform random depths.
    """
    intr = scene.camera
    zbuf, labels = _render_geometry(scene)
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 7]))

    z = zbuf.copy()
    valid = np.isfinite(z)
    if scene.noise.sigma > 0:
        z[valid] += rng.normal(0.0, scene.noise.sigma, size=int(valid.sum()))
    q = np.zeros(z.shape, dtype=np.uint16)
    qv = np.rint(np.where(valid, z, 0.0) / intr.depth_scale)
    qv = np.clip(qv, 0, 65535)
    q[valid] = qv[valid].astype(np.uint16)
    labels = labels.copy()
    labels[q == 0] = LABEL_INVALID

    if scene.noise.dropout > 0:
        drop = rng.random(q.shape) < scene.noise.dropout
        q[drop] = 0
        labels[drop] = LABEL_INVALID
    if scene.noise.outliers > 0:
        flat = rng.choice(q.size, size=min(scene.noise.outliers, q.size), replace=False)
        lo_m, hi_m = 0.1, min(2.0, 65535 * intr.depth_scale)
        depths = rng.uniform(lo_m, hi_m, size=len(flat)) / intr.depth_scale
        q.reshape(-1)[flat] = np.maximum(np.rint(depths), 1).astype(np.uint16)
        labels.reshape(-1)[flat] = LABEL_OUTLIER

    frame = DepthFrame(intr, q)
    if return_labels:
        return frame, labels
    return frame


def valid_pixel_labels(frame: DepthFrame, labels_img: np.ndarray) -> np.ndarray:
    """Labels aligned with reproject_depth's row-major valid-pixel order."""
    return labels_img.reshape(-1)[frame.depth.reshape(-1) != 0]


def make_pair(scene: SceneSpec, source_n: int) -> SynthPair:
    """One cross-source pair: unposed dense source, rendered target, exact gt."""
    subject = scene.subject
    if isinstance(subject, PointCloud):
        source = random_subsample(subject, source_n, seed=scene.seed)
    else:
        source = sample_surface(subject, source_n, seed=scene.seed)
    frame, labels_img = render_depth(scene, return_labels=True)
    gt = GroundTruthPose(
        scene.camera_pose.invert() @ scene.subject_pose, provenance="synthetic"
    )
    return SynthPair(
        source=source,
        frame=frame,
        gt=gt,
        labels=valid_pixel_labels(frame, labels_img),
    )


# --- suite generation -----------------------------------------------------------


@dataclass(frozen=True)
class DifficultyPreset:
    name: str
    max_angle_deg: float
    max_offset_m: float
    sigma_m: float
    dropout: float
    outliers: int
    table: bool


DIFFICULTY_PRESETS = {
    "easy": DifficultyPreset("easy", 10.0, 0.05, 0.001, 0.0, 0, False),
    "paper-like": DifficultyPreset("paper-like", 45.0, 0.30, 0.003, 0.02, 60, True),
}

_CAMERA_DISTANCE = 0.50


def _sample_view_pose(rng: np.random.Generator, preset: DifficultyPreset) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = np.radians(rng.uniform(0.0, preset.max_angle_deg))
    delta_r = rotation_about(axis, angle).rotation

    dz = rng.uniform(-0.06, min(0.22, preset.max_offset_m))
    lateral = min(0.10, preset.max_offset_m)
    dx, dy = rng.uniform(-lateral, lateral, size=2)
    offset = np.array([dx, dy, dz])
    norm = np.linalg.norm(offset)
    if norm > preset.max_offset_m:
        offset *= preset.max_offset_m / norm
    base_t = np.array([0.0, 0.0, _CAMERA_DISTANCE])
    return RigidTransform(delta_r @ _BASE_ROTATION, base_t + offset)


def generate_suite(
    n_subjects: int,
    views_per_subject: int,
    difficulty: str = "paper-like",
    seed: int = 0,
    out_dir=None,
    source_n: int = 40000,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    table_half_extent: float = 0.15,
) -> tuple[list[dict], Path]:
    """Write a benchmark suite (sources, frames, preprocessed targets, manifest).

    Default 10 x 3 = 30 pairs; all views of a subject share one source cloud.
    Deterministic: every artifact derives from (seed, subject, view).
    """
    if n_subjects < 1 or views_per_subject < 1:
        raise ValueError("counts must be >= 1")
    if difficulty not in DIFFICULTY_PRESETS:
        raise ValueError(
            f"unknown difficulty '{difficulty}', expected {sorted(DIFFICULTY_PRESETS)}"
        )
    preset = DIFFICULTY_PRESETS[difficulty]
    out = Path(out_dir if out_dir is not None else ".")
    (out / "sources").mkdir(parents=True, exist_ok=True)
    (out / "targets").mkdir(parents=True, exist_ok=True)

    target_params = PreprocessParams(
        seed=seed, plane_min_fraction=0.20 if preset.table else 0.45
    )
    entries: list[dict] = []
    pair_index = 0
    for si in range(n_subjects):
        rng_shape = np.random.default_rng(np.random.SeedSequence([seed, si, 1]))
        shape = HeadShape.randomized(rng_shape)
        dense = sample_surface(shape, source_n, seed=_mix(seed, si, 2))
        src_params = PreprocessParams(seed=_mix(seed, si, 3))
        source = prepare_source(dense, src_params)
        source_rel = f"sources/subject_{si:02d}.ply"
        write_ply(source, out / source_rel, binary=True)

        for vi in range(views_per_subject):
            rng_pose = np.random.default_rng(np.random.SeedSequence([seed, si, vi, 4]))
            pose = _sample_view_pose(rng_pose, preset)
            table = None
            if preset.table:
                c_local, r_bound = shape.bound()
                c_world = pose.apply_points(c_local[None])[0]
                table = TableSpec(
                    z=float(c_world[2] + r_bound + 0.005),
                    half_extent=table_half_extent,
                    center_xy=(float(c_world[0]), float(c_world[1])),
                )
            scene = SceneSpec(
                subject=shape,
                subject_pose=pose,
                camera=intrinsics,
                table=table,
                noise=NoiseSpec(preset.sigma_m, preset.outliers, preset.dropout),
                seed=_mix(seed, si, vi, 5),
            )
            frame, labels_img = render_depth(scene, return_labels=True)
            report = prepare_target(frame, replace(target_params, seed=_mix(seed, si, vi, 6)))

            stem = f"targets/pair_{pair_index:03d}"
            write_depth_pair(frame, out / f"{stem}.json", out / f"{stem}.raw")
            write_ply(report.cloud, out / f"{stem}.ply", binary=True)
            np.save(out / f"{stem}_labels.npy", valid_pixel_labels(frame, labels_img))

            entries.append(
                {
                    "id": f"s{si:02d}_v{vi}",
                    "source_ply": source_rel,
                    "target_ply": f"{stem}.ply",
                    "gt_transform": [float(v) for v in scene.subject_pose.matrix().reshape(16)],
                    "frame_json": f"{stem}.json",
                    "frame_raw": f"{stem}.raw",
                    "labels": f"{stem}_labels.npy",
                }
            )
            pair_index += 1

    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=2) + "\n")
    (out / "suite.json").write_text(
        json.dumps(
            {
                "seed": seed,
                "difficulty": difficulty,
                "n_subjects": n_subjects,
                "views_per_subject": views_per_subject,
                "source_n": source_n,
                "pairs": len(entries),
            },
            indent=2,
        )
        + "\n"
    )
    return entries, manifest_path


def _mix(*parts: int) -> int:
    """Stable scalar seed from structured parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])
