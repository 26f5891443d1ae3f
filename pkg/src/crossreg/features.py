"""Pose-invariant local descriptors: SPFH and FPFH.

A descriptor is three 11-bin histograms over the Darboux-frame angular
features (alpha, phi, theta) of point pairs, concatenated to 33 bins; each
block is normalized to sum 100. Construction depends only on relative
geometry, so descriptors are invariant under rigid motion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import FormatError
from .geometry import PointCloud

N_BINS = 11
DESCRIPTOR_SIZE = 3 * N_BINS


@dataclass(frozen=True)
class FeatureParams:
    normal_k: int = 30
    feature_radius: float = 0.025  # meters

    def __post_init__(self):
        if self.normal_k < 3:
            raise ValueError("normal_k must be >= 3")
        if self.feature_radius <= 0:
            raise ValueError("feature_radius must be > 0")


def pair_features(p_s, n_s, p_t, n_t):
    """Darboux-frame features (alpha, phi, theta, d) for one point pair.

    Roles are assigned so the source normal makes the smaller angle with the
    connecting line, which makes the result independent of argument order.
    Returns None when the frame is singular (line parallel to the normal).
    """
    a, ph, th, d, bad = _pair_feature_arrays(
        np.asarray(p_s, float)[None],
        np.asarray(n_s, float)[None],
        np.asarray(p_t, float)[None],
        np.asarray(n_t, float)[None],
    )
    if bad[0]:
        return None
    return float(a[0]), float(ph[0]), float(th[0]), float(d[0])


def _pair_feature_arrays(ps, ns, pt, nt):
    """Vectorized pair features; returns (alpha, phi, theta, d, degenerate)."""
    diff = pt - ps
    d = np.linalg.norm(diff, axis=1)
    tiny = d < 1e-12
    safe_d = np.where(tiny, 1.0, d)
    line = diff / safe_d[:, None]

    # pick as source the endpoint whose normal is closer to the line
    cos_s = np.abs(np.einsum("ij,ij->i", ns, line))
    cos_t = np.abs(np.einsum("ij,ij->i", nt, line))
    swap = cos_t > cos_s
    u = np.where(swap[:, None], nt, ns)
    n2 = np.where(swap[:, None], ns, nt)
    line = np.where(swap[:, None], -line, line)

    cross = np.cross(line, u)
    cross_norm = np.linalg.norm(cross, axis=1)
    degenerate = (cross_norm < 1e-9) | tiny
    cross_norm = np.where(degenerate, 1.0, cross_norm)
    v = cross / cross_norm[:, None]
    w = np.cross(u, v)

    alpha = np.einsum("ij,ij->i", v, n2)
    phi = np.einsum("ij,ij->i", u, line)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n2), np.einsum("ij,ij->i", u, n2))
    return alpha, phi, theta, d, degenerate


def _bin_indices(alpha, phi, theta):
    ba = np.clip(((alpha + 1.0) * (N_BINS / 2.0)).astype(np.int64), 0, N_BINS - 1)
    bp = np.clip(((phi + 1.0) * (N_BINS / 2.0)).astype(np.int64), 0, N_BINS - 1)
    bt = np.clip(
        ((theta + np.pi) * (N_BINS / (2.0 * np.pi))).astype(np.int64), 0, N_BINS - 1
    )
    return ba, bp, bt


@dataclass(frozen=True)
class FpfhResult:
    """descriptors is (n, 33) float64; zero_neighbor marks isolated points."""

    descriptors: np.ndarray
    zero_neighbor: np.ndarray

    def __len__(self) -> int:
        return len(self.descriptors)


def compute_fpfh(cloud: PointCloud, params: FeatureParams) -> FpfhResult:
    """FPFH of every point over neighbors within feature_radius.

    FPFH(p) = SPFH(p) + (1/k) * sum_q SPFH(q) / |p - q| over the k radius
    neighbors q of p; each 11-bin block then renormalized to sum 100.
    Isolated points keep an all-zero descriptor and are flagged, preserving
    index alignment with the cloud.
    """
    if cloud.normals is None:
        raise ValueError("normals required")
    n = len(cloud)
    if n < 2:
        raise ValueError("cloud must have at least 2 points")
    pts, nrm = cloud.points, cloud.normals

    tree = cKDTree(pts)
    pairs = tree.query_pairs(params.feature_radius, output_type="ndarray")
    spfh = np.zeros((n, DESCRIPTOR_SIZE))
    neighbor_count = np.zeros(n, dtype=np.int64)
    fpfh = np.zeros((n, DESCRIPTOR_SIZE))

    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        neighbor_count = np.bincount(i, minlength=n) + np.bincount(j, minlength=n)

        alpha, phi, theta, dist, bad = _pair_feature_arrays(
            pts[i], nrm[i], pts[j], nrm[j]
        )
        ok = ~bad
        ba, bp, bt = _bin_indices(alpha[ok], phi[ok], theta[ok])
        # each pair contributes one count to both endpoints' SPFH
        ends = np.concatenate([i[ok], j[ok]]) * DESCRIPTOR_SIZE
        size = n * DESCRIPTOR_SIZE
        flat = np.bincount(ends + np.tile(ba, 2), minlength=size)
        flat += np.bincount(ends + N_BINS + np.tile(bp, 2), minlength=size)
        flat += np.bincount(ends + 2 * N_BINS + np.tile(bt, 2), minlength=size)
        spfh = flat.reshape(n, DESCRIPTOR_SIZE).astype(np.float64)

        # neighbor-weighted aggregation, both directions of every pair
        w = 1.0 / np.maximum(dist, 1e-12)
        weights = sparse.coo_matrix(
            (np.tile(w, 2), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(n, n),
        ).tocsr()
        acc = weights @ spfh
        has = neighbor_count > 0
        fpfh[has] = spfh[has] + acc[has] / neighbor_count[has, None]

        # percentage normalization per block
        blocks = fpfh.reshape(n, 3, N_BINS)
        sums = blocks.sum(axis=2, keepdims=True)
        np.divide(blocks * 100.0, sums, out=blocks, where=sums > 0)

    return FpfhResult(descriptors=fpfh, zero_neighbor=neighbor_count == 0)


def write_descriptors(result: FpfhResult, bin_path, meta_path, params: FeatureParams) -> None:
    """Debug dump: little-endian float32 n x 33 plus a JSON sidecar."""
    arr = result.descriptors.astype("<f4")
    Path(bin_path).write_bytes(arr.tobytes())
    meta = {
        "count": int(len(result)),
        "width": DESCRIPTOR_SIZE,
        "normal_k": params.normal_k,
        "feature_radius": params.feature_radius,
        "zero_neighbor": [int(v) for v in np.nonzero(result.zero_neighbor)[0]],
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2) + "\n")


def read_descriptors(bin_path, meta_path) -> FpfhResult:
    meta = json.loads(Path(meta_path).read_text())
    count, width = int(meta["count"]), int(meta["width"])
    raw = Path(bin_path).read_bytes()
    expected = 4 * count * width
    if len(raw) != expected:
        raise FormatError(f"{bin_path}: expected {expected} bytes, got {len(raw)}")
    desc = np.frombuffer(raw, dtype="<f4").reshape(count, width).astype(np.float64)
    zero = np.zeros(count, dtype=bool)
    zero[np.asarray(meta.get("zero_neighbor", []), dtype=int)] = True
    return FpfhResult(desc, zero)
