"""Core geometric types and primitives.

Units are meters throughout; anything reported in centimeters is converted
at the reporting surface, never here. All types are immutable after
construction (arrays are marked read-only) and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

FloatArray = NDArray[np.float64]

_UNIT_TOL = 1e-6
_ROT_TOL = 1e-6


def _as_points(a, name: str = "points") -> FloatArray:
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contain non-finite values")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with optional unit normals."""

    points: FloatArray
    normals: FloatArray | None = None

    def __post_init__(self):
        pts = _freeze(_as_points(self.points))
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if len(nrm) != len(pts):
                raise ValueError(
                    f"normals length {len(nrm)} != points length {len(pts)}"
                )
            norms = np.linalg.norm(nrm, axis=1)
            if len(nrm) and np.abs(norms - 1.0).max() > _UNIT_TOL:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", _freeze(nrm))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, indices) -> "PointCloud":
        """Subset by index array, carrying normals along."""
        idx = np.asarray(indices)
        nrm = self.normals[idx] if self.normals is not None else None
        return PointCloud(self.points[idx], nrm)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals)


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) element: proper rotation plus translation in meters."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > _ROT_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _freeze(R))
        object.__setattr__(self, "translation", _freeze(t))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix (row-major)."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("matrix contains non-finite values")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ValueError("last row of a rigid 4x4 matrix must be (0, 0, 0, 1)")
        return RigidTransform(m[:3, :3], m[:3, 3])

    def matrix(self) -> FloatArray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply_points(self, points: np.ndarray) -> FloatArray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply(self, cloud: PointCloud) -> PointCloud:
        """Map points p -> R p + t and normals n -> R n."""
        nrm = None
        if cloud.normals is not None:
            nrm = cloud.normals @ self.rotation.T
        return PointCloud(self.apply_points(cloud.points), nrm)


def rotation_about(axis, angle_rad: float) -> RigidTransform:
    """Pure rotation by ``angle_rad`` about ``axis`` (Rodrigues)."""
    a = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("axis must be nonzero")
    a = a / n
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    R = np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * (K @ K)
    return RigidTransform(R, np.zeros(3))


def random_rigid(
    rng: np.random.Generator,
    max_angle_rad: float = np.pi,
    max_translation: float = 1.0,
) -> RigidTransform:
    """Random transform with rotation angle <= max_angle_rad and |t| <= max_translation."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle_rad)
    direction = rng.normal(size=3)
    nd = np.linalg.norm(direction)
    direction = direction / nd if nd > 1e-12 else np.array([1.0, 0.0, 0.0])
    t = direction * rng.uniform(0.0, max_translation)
    rot = rotation_about(axis, angle)
    return RigidTransform(rot.rotation, t)


class NeighborIndex:
    """Spatial index over a point cloud for k-NN and radius queries.

    Queries return exactly what exhaustive search would, with ties broken
    by the lower point index. Read-only and safe for concurrent queries.
    """

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
        if len(pts) == 0:
            raise ValueError("empty cloud")
        self._points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self._points)

    @property
    def tree(self) -> cKDTree:
        """Underlying KD-tree, for bulk internal queries."""
        return self._tree

    def _rank(self, query, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = np.linalg.norm(self._points[candidates] - np.asarray(query, float), axis=1)
        order = np.lexsort((candidates, d))
        return candidates[order], d[order]

    def knn(self, query, k: int) -> list[tuple[int, float]]:
        """The min(k, n) nearest points, ascending by (distance, index)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, len(self._points))
        d, _ = self._tree.query(np.asarray(query, float), k=k)
        dk = float(np.max(d))
        # Re-rank everything within the k-th distance so exact ties resolve
        # by lower index, independent of tree layout.
        cand = np.asarray(self._tree.query_ball_point(np.asarray(query, float), dk), dtype=int)
        idx, dist = self._rank(query, cand)
        return [(int(i), float(x)) for i, x in zip(idx[:k], dist[:k])]

    def radius(self, query, r: float) -> list[tuple[int, float]]:
        """All points with distance <= r, ascending by (distance, index)."""
        if r <= 0:
            raise ValueError("radius must be > 0")
        cand = np.asarray(self._tree.query_ball_point(np.asarray(query, float), r), dtype=int)
        if cand.size == 0:
            return []
        idx, dist = self._rank(query, cand)
        return [(int(i), float(x)) for i, x in zip(idx, dist)]


def estimate_normals(
    cloud: PointCloud, k: int, viewpoint
) -> tuple[PointCloud, int]:
    """Per-point normals from k-NN covariance, oriented toward ``viewpoint``.

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue, sign-flipped so normal . (viewpoint - point) >= 0.
    Degenerate neighborhoods (all points coincident) fall back to (0, 0, 1);
    their count is returned alongside the cloud so batch runs never abort.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(cloud) < k:
        raise ValueError(f"cloud has {len(cloud)} points, need at least k={k}")
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)

    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k)
    neigh = cloud.points[idx]  # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0].copy()

    degenerate = eigvals[:, 2] < 1e-18
    n_degenerate = int(degenerate.sum())
    if n_degenerate:
        normals[degenerate] = (0.0, 0.0, 1.0)

    flip = np.einsum("ni,ni->n", normals, vp - cloud.points) < 0.0
    flip &= ~degenerate
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(normals), n_degenerate


def random_subsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform sample without replacement; keeps input order, fixed by seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= len(cloud):
        return cloud
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(cloud), size=n, replace=False))
    return cloud.select(keep)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel cell: the centroid of its members.

    Normals, when present, are averaged and renormalized (falling back to
    the lowest-index member when the mean cancels out).
    """
    if voxel <= 0:
        raise ValueError("voxel must be > 0")
    if len(cloud) == 0:
        return cloud
    cells = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(
        cells, axis=0, return_inverse=True, return_counts=True
    )
    n_cells = len(counts)
    centroids = np.zeros((n_cells, 3))
    np.add.at(centroids, inverse, cloud.points)
    centroids /= counts[:, None]

    normals = None
    if cloud.normals is not None:
        acc = np.zeros((n_cells, 3))
        np.add.at(acc, inverse, cloud.normals)
        norms = np.linalg.norm(acc, axis=1)
        bad = norms < 1e-12
        if bad.any():
            # first member by index is deterministic
            first = np.full(n_cells, len(cloud), dtype=np.int64)
            np.minimum.at(first, inverse, np.arange(len(cloud)))
            acc[bad] = cloud.normals[first[bad]]
            norms = np.linalg.norm(acc, axis=1)
        normals = acc / norms[:, None]
    return PointCloud(centroids, normals)
