"""Rigid alignment: closed-form fitting, RANSAC global registration over
feature matches, ICP refinement, and the combined global+ICP pipeline.

All randomized stages are seeded and reproducible; results are selected by
(inlier count, lower rmse, earlier hypothesis) so parallel evaluation
schedules cannot change the outcome.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
from scipy.spatial import cKDTree

from .errors import RegistrationError
from .features import FeatureParams, compute_fpfh
from .geometry import (
    FloatArray,
    PointCloud,
    RigidTransform,
    estimate_normals,
    voxel_downsample,
)

DEFAULT_FEATURE_VOXEL = 0.005  # density control before descriptors, meters


@dataclass(frozen=True)
class Correspondences:
    """Columnar correspondence set between a source and a target cloud."""

    source_idx: np.ndarray
    target_idx: np.ndarray
    distance: np.ndarray  # feature-space distance

    def __post_init__(self):
        si = np.asarray(self.source_idx, dtype=np.int64)
        ti = np.asarray(self.target_idx, dtype=np.int64)
        d = np.asarray(self.distance, dtype=np.float64)
        if not (len(si) == len(ti) == len(d)):
            raise ValueError("correspondence columns must have equal length")
        object.__setattr__(self, "source_idx", si)
        object.__setattr__(self, "target_idx", ti)
        object.__setattr__(self, "distance", d)

    def __len__(self) -> int:
        return len(self.source_idx)


@dataclass(frozen=True)
class RansacParams:
    max_corr_dist: float = 0.015
    sample_size: int = 3
    max_iters: int = 100000
    confidence: float = 0.999
    edge_ratio: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.sample_size < 3:
            raise ValueError("sample_size must be >= 3")
        if not (0 < self.confidence < 1):
            raise ValueError("confidence must be in (0, 1)")
        if not (0 < self.edge_ratio <= 1):
            raise ValueError("edge_ratio must be in (0, 1]")
        if self.max_corr_dist <= 0 or self.max_iters < 1:
            raise ValueError("max_corr_dist must be > 0 and max_iters >= 1")


@dataclass(frozen=True)
class IcpParams:
    max_corr_dist: float = 0.01
    max_iters: int = 50
    rel_rmse_tol: float = 1e-6
    variant: Literal["point-to-point", "point-to-plane"] = "point-to-point"

    def __post_init__(self):
        if self.max_corr_dist <= 0:
            raise ValueError("max_corr_dist must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.variant not in ("point-to-point", "point-to-plane"):
            raise ValueError(f"unknown ICP variant '{self.variant}'")


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    fitness: float  # inlier fraction in [0, 1]
    inlier_rmse: float  # meters
    iterations: int
    wall_time: float  # seconds
    rmse_history: tuple[float, ...] | None = None
    stage_times: Mapping[str, float] | None = None


def fit_rigid(source_pts, target_pts, weights=None) -> RigidTransform:
    """Least-squares rigid transform via cross-covariance SVD.

    Minimizes sum w_i |R s_i + t - t_i|^2; the determinant correction
    guarantees a proper rotation even for reflection-inducing inputs.
    """
    s = np.asarray(source_pts, dtype=np.float64)
    t = np.asarray(target_pts, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2 or s.shape[1] != 3:
        raise ValueError(f"point lists must share shape (n, 3), got {s.shape} vs {t.shape}")
    if len(s) < 3:
        raise ValueError("need at least 3 correspondences")
    if weights is None:
        w = np.ones(len(s))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(s),) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
    w = w / w.sum()

    cs = w @ s
    ct = w @ t
    H = (s - cs).T @ ((t - ct) * w[:, None])
    U, sv, Vt = np.linalg.svd(H)
    if sv[1] <= max(sv[0], 1e-300) * 1e-9:
        raise ValueError("degenerate correspondence set")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, ct - R @ cs)


def match_features(desc_s: np.ndarray, desc_t: np.ndarray, mutual: bool = True) -> Correspondences:
    """Nearest-neighbor matching in descriptor space (L2), optionally mutual."""
    a = np.asarray(desc_s, dtype=np.float64)
    b = np.asarray(desc_t, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("descriptor arrays must be 2D with matching width")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("descriptor lists must be non-empty")

    nn_t, d_t = _chunked_nearest(a, b)
    if not mutual:
        return Correspondences(np.arange(len(a)), nn_t, d_t)
    nn_s, _ = _chunked_nearest(b, a)
    keep = nn_s[nn_t] == np.arange(len(a))
    idx = np.nonzero(keep)[0]
    return Correspondences(idx, nn_t[idx], d_t[idx])


def _chunked_nearest(q: np.ndarray, ref: np.ndarray, chunk: int = 2048):
    """argmin_j |q_i - ref_j| by blocked matmul; memory stays O(chunk * n)."""
    ref_sq = np.einsum("ij,ij->i", ref, ref)
    best_idx = np.empty(len(q), dtype=np.int64)
    best_d2 = np.empty(len(q))
    for lo in range(0, len(q), chunk):
        hi = min(lo + chunk, len(q))
        block = q[lo:hi]
        d2 = np.einsum("ij,ij->i", block, block)[:, None] - 2.0 * (block @ ref.T) + ref_sq
        best_idx[lo:hi] = np.argmin(d2, axis=1)
        best_d2[lo:hi] = d2[np.arange(hi - lo), best_idx[lo:hi]]
    return best_idx, np.sqrt(np.maximum(best_d2, 0.0))


def evaluate_alignment(
    source: PointCloud, target: PointCloud, transform: RigidTransform, max_dist: float
) -> tuple[float, float]:
    """(fitness, inlier_rmse) of transformed source against target at a gate."""
    moved = transform.apply_points(source.points)
    d, _ = cKDTree(target.points).query(moved, k=1)
    mask = d <= max_dist
    if not mask.any():
        return 0.0, float("inf")
    return float(mask.mean()), float(np.sqrt(np.mean(d[mask] ** 2)))


def ransac_global(
    source: PointCloud,
    target: PointCloud,
    corrs: Correspondences,
    params: RansacParams,
) -> RegistrationResult:
    """Sample-consensus rigid fit over putative feature correspondences.

    Hypotheses failing the edge-length prefilter are rejected before fitting;
    iteration stops once the confidence criterion is met. The winning model
    is refit on its full inlier set.
    """
    t0 = time.perf_counter()
    n = len(corrs)
    s_all = params.sample_size
    if n < s_all:
        raise ValueError(f"need at least sample_size={s_all} correspondences, got {n}")
    sp = source.points[corrs.source_idx]
    tp = target.points[corrs.target_idx]
    rng = np.random.default_rng(params.seed)
    pair_a, pair_b = np.triu_indices(s_all, k=1)

    best_count = 0
    best_rmse = np.inf
    best_T: RigidTransform | None = None
    drawn = 0
    needed = params.max_iters
    batch = 256

    while drawn < min(params.max_iters, needed):
        m = min(batch, params.max_iters - drawn)
        idx = rng.integers(0, n, size=(m, s_all))
        while True:
            dup = np.zeros(m, dtype=bool)
            for a, b in zip(pair_a, pair_b):
                dup |= idx[:, a] == idx[:, b]
            if not dup.any():
                break
            idx[dup] = rng.integers(0, n, size=(int(dup.sum()), s_all))

        S = sp[idx]  # (m, s, 3)
        T = tp[idx]
        ds = np.linalg.norm(S[:, pair_a] - S[:, pair_b], axis=2)
        dt = np.linalg.norm(T[:, pair_a] - T[:, pair_b], axis=2)
        edge_ok = ((ds >= params.edge_ratio * dt) & (dt >= params.edge_ratio * ds)).all(axis=1)

        rows = np.nonzero(edge_ok)[0]
        if len(rows):
            R, t, ok = _batched_rigid(S[rows], T[rows])
            R, t = R[ok], t[ok]
            for lo in range(0, len(R), 64):
                Rb, tb = R[lo : lo + 64], t[lo : lo + 64]
                moved = np.einsum("kij,nj->kni", Rb, sp) + tb[:, None, :]
                d = np.linalg.norm(moved - tp[None], axis=2)  # (k, n)
                inl = d <= params.max_corr_dist
                counts = inl.sum(axis=1)
                sq = np.where(inl, d * d, 0.0).sum(axis=1)
                for k in range(len(Rb)):
                    count = int(counts[k])
                    if count == 0:
                        continue
                    rmse = float(np.sqrt(sq[k] / count))
                    if count > best_count or (count == best_count and rmse < best_rmse):
                        best_count, best_rmse = count, rmse
                        best_T = RigidTransform(Rb[k], tb[k])
        drawn += m

        if best_count >= s_all:
            w_in = best_count / n
            if w_in >= 1.0:
                needed = drawn
            else:
                p_fail = 1.0 - w_in**s_all
                needed = int(np.ceil(np.log(1.0 - params.confidence) / np.log(p_fail)))

    if best_T is None or best_count < s_all:
        raise RegistrationError(
            "global registration failed: no consistent hypothesis",
            diagnostics={"best_fitness": best_count / n, "iterations": drawn},
        )

    # refit on the winning inlier set, then re-evaluate
    d = np.linalg.norm(best_T.apply_points(sp) - tp, axis=1)
    inl = d <= params.max_corr_dist
    final_T = best_T
    if inl.sum() >= 3:
        try:
            final_T = fit_rigid(sp[inl], tp[inl])
        except ValueError:
            final_T = best_T
    d = np.linalg.norm(final_T.apply_points(sp) - tp, axis=1)
    inl = d <= params.max_corr_dist
    if not inl.any():  # refit drifted off its support; keep the raw hypothesis
        final_T = best_T
        d = np.linalg.norm(final_T.apply_points(sp) - tp, axis=1)
        inl = d <= params.max_corr_dist
    return RegistrationResult(
        transform=final_T,
        fitness=float(inl.mean()),
        inlier_rmse=float(np.sqrt(np.mean(d[inl] ** 2))) if inl.any() else float("inf"),
        iterations=drawn,
        wall_time=time.perf_counter() - t0,
    )


def _batched_rigid(S: np.ndarray, T: np.ndarray):
    """Kabsch for a batch of minimal samples; flags degenerate ones."""
    cs = S.mean(axis=1, keepdims=True)
    ct = T.mean(axis=1, keepdims=True)
    H = np.einsum("mki,mkj->mij", S - cs, T - ct)
    U, sv, Vt = np.linalg.svd(H)
    ok = sv[:, 1] > np.maximum(sv[:, 0], 1e-300) * 1e-9
    det = np.linalg.det(np.einsum("mij,mkj->mik", Vt.transpose(0, 2, 1), U))
    D = np.repeat(np.eye(3)[None], len(S), axis=0)
    D[:, 2, 2] = np.sign(det)
    R = np.einsum("mji,mjk,mlk->mil", Vt, D, U)
    t = ct[:, 0] - np.einsum("mij,mj->mi", R, cs[:, 0])
    return R, t, ok


def icp(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    params: IcpParams,
) -> RegistrationResult:
    """Iterative closest point from an initial transform.

    Alternates gated nearest-neighbor correspondence with a closed-form
    (or linearized point-to-plane) update until the relative RMSE change
    falls below tolerance. Raises RegistrationError carrying the last
    transform if the gate empties.
    """
    t0 = time.perf_counter()
    if len(source) == 0 or len(target) == 0:
        raise ValueError("clouds must be non-empty")
    if params.variant == "point-to-plane" and target.normals is None:
        raise ValueError("point-to-plane ICP requires target normals")

    tree = cKDTree(target.points)
    T = init
    prev_rmse: float | None = None
    history: list[float] = []
    iterations = 0

    for _ in range(params.max_iters):
        iterations += 1
        moved = T.apply_points(source.points)
        d, j = tree.query(moved, k=1)
        mask = d <= params.max_corr_dist
        if not mask.any():
            raise RegistrationError(
                "icp lost track: no correspondences within gate",
                last_transform=T,
                diagnostics={"iteration": iterations},
            )
        rmse = float(np.sqrt(np.mean(d[mask] ** 2)))
        history.append(rmse)
        if rmse < 1e-12:
            break
        if prev_rmse is not None and abs(prev_rmse - rmse) <= params.rel_rmse_tol * max(prev_rmse, 1e-30):
            break
        prev_rmse = rmse

        p = moved[mask]
        q = target.points[j[mask]]
        if params.variant == "point-to-point":
            delta = fit_rigid(p, q)
        else:
            delta = _point_to_plane_step(p, q, target.normals[j[mask]])
        T = delta @ T

    moved = T.apply_points(source.points)
    d, _ = tree.query(moved, k=1)
    mask = d <= params.max_corr_dist
    fitness = float(mask.mean())
    rmse = float(np.sqrt(np.mean(d[mask] ** 2))) if mask.any() else float("inf")
    return RegistrationResult(
        transform=T,
        fitness=fitness,
        inlier_rmse=rmse,
        iterations=iterations,
        wall_time=time.perf_counter() - t0,
        rmse_history=tuple(history),
    )


def _point_to_plane_step(p, q, n) -> RigidTransform:
    """Small-angle linearization of sum (n . (R p + t - q))^2."""
    r = np.einsum("ij,ij->i", n, p - q)
    A = np.hstack([np.cross(p, n), n])
    x, *_ = np.linalg.lstsq(A, -r, rcond=None)
    w, dt = x[:3], x[3:]
    angle = np.linalg.norm(w)
    if angle < 1e-30:
        R = np.eye(3)
    else:
        k = w / angle
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
    return RigidTransform(R, dt)


def _with_normals(cloud: PointCloud, k: int, viewpoint) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    k = min(k, len(cloud))
    if k < 3:
        raise ValueError("too few points to estimate normals")
    oriented, _ = estimate_normals(cloud, k, viewpoint)
    return oriented


def register_global(
    source: PointCloud,
    target: PointCloud,
    ransac_params: RansacParams = RansacParams(),
    feature_params: FeatureParams = FeatureParams(),
    *,
    feature_voxel: float | None = DEFAULT_FEATURE_VOXEL,
    source_viewpoint=(0.0, 0.0, 0.0),
    target_viewpoint=(0.0, 0.0, 0.0),
) -> RegistrationResult:
    """Feature-based global alignment: normals, FPFH, matching, RANSAC.

    Clouds are voxel-thinned before descriptor computation (feature_voxel
    None disables); carried normals are reused, otherwise estimated toward
    the given viewpoints. Fitness and rmse are evaluated over the full
    clouds at the RANSAC gate so stages stay comparable.
    """
    t0 = time.perf_counter()
    if len(source) == 0 or len(target) == 0:
        raise ValueError("clouds must be non-empty")
    times: dict[str, float] = {}

    tick = time.perf_counter()
    s_feat = voxel_downsample(source, feature_voxel) if feature_voxel else source
    t_feat = voxel_downsample(target, feature_voxel) if feature_voxel else target
    s_feat = _with_normals(s_feat, feature_params.normal_k, source_viewpoint)
    t_feat = _with_normals(t_feat, feature_params.normal_k, target_viewpoint)
    times["normals"] = time.perf_counter() - tick

    tick = time.perf_counter()
    fs = compute_fpfh(s_feat, feature_params)
    ft = compute_fpfh(t_feat, feature_params)
    times["features"] = time.perf_counter() - tick

    tick = time.perf_counter()
    # nearest-neighbor matches in both directions: smooth anatomy yields
    # weak descriptor contrast, so flooding RANSAC with every candidate
    # beats a strict mutual filter that starves it of the true pairs
    fwd = match_features(fs.descriptors, ft.descriptors, mutual=False)
    rev = match_features(ft.descriptors, fs.descriptors, mutual=False)
    pairs = np.unique(
        np.stack(
            [
                np.concatenate([fwd.source_idx, rev.target_idx]),
                np.concatenate([fwd.target_idx, rev.source_idx]),
            ],
            axis=1,
        ),
        axis=0,
    )
    dist = np.linalg.norm(
        fs.descriptors[pairs[:, 0]] - ft.descriptors[pairs[:, 1]], axis=1
    )
    corrs = Correspondences(pairs[:, 0], pairs[:, 1], dist)
    times["match"] = time.perf_counter() - tick

    tick = time.perf_counter()
    result = ransac_global(s_feat, t_feat, corrs, ransac_params)
    times["ransac"] = time.perf_counter() - tick

    fitness, rmse = evaluate_alignment(source, target, result.transform, ransac_params.max_corr_dist)
    return RegistrationResult(
        transform=result.transform,
        fitness=fitness,
        inlier_rmse=rmse,
        iterations=result.iterations,
        wall_time=time.perf_counter() - t0,
        stage_times=times,
    )


def register_global_icp(
    source: PointCloud,
    target: PointCloud,
    ransac_params: RansacParams = RansacParams(),
    icp_params: IcpParams = IcpParams(),
    feature_params: FeatureParams = FeatureParams(),
    *,
    feature_voxel: float | None = DEFAULT_FEATURE_VOXEL,
    source_viewpoint=(0.0, 0.0, 0.0),
    target_viewpoint=(0.0, 0.0, 0.0),
) -> RegistrationResult:
    """Global registration refined by ICP, the benchmark pipeline.

    The refined transform is kept only if it evaluates at least as well as
    the global stage at the shared gate (fitness first, then rmse), so
    refinement can never degrade the reported alignment.
    """
    t0 = time.perf_counter()
    glob = register_global(
        source,
        target,
        ransac_params,
        feature_params,
        feature_voxel=feature_voxel,
        source_viewpoint=source_viewpoint,
        target_viewpoint=target_viewpoint,
    )
    times = dict(glob.stage_times or {})

    tick = time.perf_counter()
    icp_target = target
    if icp_params.variant == "point-to-plane":
        icp_target = _with_normals(target, feature_params.normal_k, target_viewpoint)
    try:
        refined = icp(source, icp_target, glob.transform, icp_params)
        icp_error = None
    except RegistrationError as e:
        refined = None
        icp_error = e
    times["icp"] = time.perf_counter() - tick

    best_T = glob.transform
    fitness, rmse = glob.fitness, glob.inlier_rmse
    iterations = glob.iterations
    if refined is not None:
        r_fit, r_rmse = evaluate_alignment(
            source, target, refined.transform, ransac_params.max_corr_dist
        )
        # refinement must not worsen the gated rmse; the fitness floor
        # rejects an ICP that collapsed onto a small subset
        if r_rmse <= rmse and r_fit >= 0.5 * fitness:
            best_T, fitness, rmse = refined.transform, r_fit, r_rmse
        iterations = refined.iterations
    elif icp_error is not None and glob.fitness == 0.0:
        raise RegistrationError(
            f"icp: {icp_error}", last_transform=glob.transform
        ) from icp_error

    return RegistrationResult(
        transform=best_T,
        fitness=fitness,
        inlier_rmse=rmse,
        iterations=iterations,
        wall_time=time.perf_counter() - t0,
        stage_times=times,
    )


# --- transform interchange ----------------------------------------------------


def save_transform(path, transform: RigidTransform) -> None:
    """4x4 row-major; JSON array for .json paths, whitespace text otherwise."""
    path = Path(path)
    flat = [float(v) for v in transform.matrix().reshape(16)]
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(flat) + "\n")
    else:
        m = transform.matrix()
        lines = [" ".join(repr(float(v)) for v in row) for row in m]
        path.write_text("\n".join(lines) + "\n")


def load_transform(path) -> RigidTransform:
    text = Path(path).read_text().strip()
    try:
        values = json.loads(text)
    except json.JSONDecodeError:
        values = text.split()
    arr = np.asarray([float(v) for v in values], dtype=np.float64)
    if arr.size != 16:
        raise ValueError(f"{path}: expected 16 numbers, got {arr.size}")
    return RigidTransform.from_matrix(arr.reshape(4, 4))
