"""Conversion between external representations and point clouds.

File containers:
  - PLY, ASCII or binary little-endian, float32 x y z (+ optional nx ny nz).
  - Depth frame: ``<name>.json`` (width, height, fx, fy, cx, cy, depth_scale)
    plus ``<name>.raw`` (row-major little-endian uint16, 0 = no return).
  - Scalar volume: ``<name>.json`` (dims, spacing, origin) plus ``<name>.raw``
    (row-major little-endian float32).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from .errors import FormatError
from .geometry import FloatArray, PointCloud


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters; depth_scale converts stored units to meters."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise FormatError(f"bad image size {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise FormatError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise FormatError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise FormatError("depth_scale must be positive")


@dataclass(frozen=True)
class DepthFrame:
    """A 16-bit range image; value 0 marks an invalid pixel."""

    intrinsics: CameraIntrinsics
    depth: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        d = np.asarray(self.depth)
        if d.dtype != np.uint16:
            if not np.issubdtype(d.dtype, np.integer) or d.min() < 0 or d.max() > 65535:
                raise FormatError("depth values must fit in uint16")
            d = d.astype(np.uint16)
        expected = (self.intrinsics.height, self.intrinsics.width)
        if d.ndim == 1:
            if d.size != expected[0] * expected[1]:
                raise FormatError(
                    f"depth length {d.size} != width*height {expected[0] * expected[1]}"
                )
            d = d.reshape(expected)
        elif d.shape != expected:
            raise FormatError(f"depth shape {d.shape} != (height, width) {expected}")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.depth))


@dataclass(frozen=True)
class ScalarVolume:
    """A dense scalar grid (e.g. CT intensity) with world placement."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: FloatArray
    values: np.ndarray  # shape dims, C order

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if any(d < 1 for d in dims):
            raise FormatError(f"bad dims {dims}")
        if any(s <= 0 for s in spacing):
            raise FormatError(f"spacing must be positive, got {spacing}")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.size != dims[0] * dims[1] * dims[2]:
            raise FormatError(
                f"values size {vals.size} != nx*ny*nz {dims[0] * dims[1] * dims[2]}"
            )
        vals = vals.reshape(dims).copy()
        vals.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", vals)


def reproject_depth(frame: DepthFrame, min_m: float, max_m: float) -> PointCloud:
    """Back-project valid pixels with z in [min_m, max_m] to camera space.

    The camera sits at the origin looking along +z; output order is
    row-major over the image.
    """
    if not (0 <= min_m < max_m):
        raise ValueError(f"need 0 <= min_m < max_m, got {min_m}, {max_m}")
    intr = frame.intrinsics
    z = frame.depth.astype(np.float64) * intr.depth_scale
    valid = (frame.depth != 0) & (z >= min_m) & (z <= max_m)
    vs, us = np.nonzero(valid)
    zv = z[vs, us]
    x = (us - intr.cx) * zv / intr.fx
    y = (vs - intr.cy) * zv / intr.fy
    return PointCloud(np.column_stack([x, y, zv]))


def extract_isosurface_points(vol: ScalarVolume, iso: float) -> PointCloud:
    """Marching-cubes vertices of the level set value=iso, in world coordinates.

    Duplicate vertices within 1e-9 are merged. An iso value outside the
    volume's range yields an empty cloud with a warning.
    """
    if any(d < 2 for d in vol.dims):
        raise ValueError(f"volume dims must be >= 2 on every axis, got {vol.dims}")
    vmin, vmax = float(vol.values.min()), float(vol.values.max())
    if iso < vmin or iso > vmax or vmin == vmax:
        warnings.warn(
            f"iso value {iso} outside volume range [{vmin}, {vmax}]; returning empty cloud"
        )
        return PointCloud(np.empty((0, 3)))
    verts, _, _, _ = measure.marching_cubes(vol.values, level=iso, spacing=vol.spacing)
    world = verts + vol.origin
    # merge coincident vertices on a 1e-9 grid, ordered deterministically
    keys = np.round(world * 1e9).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return PointCloud(world[np.sort(first)])


# --- PLY -------------------------------------------------------------------

_PLY_VERTEX_PROPS = ("x", "y", "z", "nx", "ny", "nz")


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write float32 x y z (+ normals when present)."""
    path = Path(path)
    has_n = cloud.normals is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {len(cloud)}")
    names = _PLY_VERTEX_PROPS if has_n else _PLY_VERTEX_PROPS[:3]
    header.extend(f"property float {n}" for n in names)
    header.append("end_header")

    data = cloud.points
    if has_n:
        data = np.hstack([cloud.points, cloud.normals])
    data32 = data.astype("<f4")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(data32.tobytes())
        else:
            for row in data32:
                # 9 significant digits round-trip IEEE single exactly
                f.write((" ".join(f"{float(v):.9g}" for v in row) + "\n").encode("ascii"))


_PLY_SCALAR_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}

_PLY_NUMPY = {
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def read_ply(path) -> PointCloud:
    """Read a PLY vertex cloud (ASCII or binary little-endian)."""
    path = Path(path)
    raw = path.read_bytes()

    # header
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise FormatError(f"{path}: header not terminated")
    body_offset = nl + 1
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    n_vertices = None
    props: list[tuple[str, str]] = []  # (type, name)
    in_vertex = False
    for line in header_lines[1:]:
        tokens = line.strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise FormatError(f"{path}: unsupported format '{tokens[1]}'")
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                n_vertices = int(tokens[2])
                in_vertex = True
            else:
                if n_vertices is None:
                    raise FormatError(
                        f"{path}: element '{tokens[1]}' precedes vertex element"
                    )
                in_vertex = False
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError(f"{path}: list property in vertex element")
            if tokens[1] not in _PLY_SCALAR_SIZES:
                raise FormatError(f"{path}: unknown property type '{tokens[1]}'")
            props.append((tokens[1], tokens[2]))
    if fmt is None or n_vertices is None:
        raise FormatError(f"{path}: missing format or vertex element")

    names = [name for _, name in props]
    for required in ("x", "y", "z"):
        if required not in names:
            raise FormatError(f"{path}: vertex element lacks property '{required}'")
        ptype = props[names.index(required)][0]
        if ptype not in ("float", "float32"):
            raise FormatError(f"{path}: property '{required}' must be float, is {ptype}")
    has_normals = all(n in names for n in ("nx", "ny", "nz"))

    if fmt == "binary":
        dtype = np.dtype([(name, _PLY_NUMPY[ptype]) for ptype, name in props])
        expected = dtype.itemsize * n_vertices
        available = len(raw) - body_offset
        if available < expected:
            raise FormatError(
                f"{path}: truncated payload at byte offset {body_offset}: "
                f"expected {expected} bytes, got {available}"
            )
        table = np.frombuffer(raw, dtype=dtype, count=n_vertices, offset=body_offset)
    else:
        text = raw[body_offset:].decode("ascii", errors="replace")
        rows = text.split()
        need = n_vertices * len(props)
        if len(rows) < need:
            raise FormatError(
                f"{path}: truncated payload at byte offset {body_offset}: "
                f"expected {need} values, got {len(rows)}"
            )
        try:
            flat = np.array(rows[:need], dtype=np.float64).reshape(n_vertices, len(props))
        except ValueError as e:
            raise FormatError(f"{path}: bad ASCII payload: {e}") from None
        table = {name: flat[:, i] for i, (_, name) in enumerate(props)}

    def col(name: str) -> np.ndarray:
        c = table[name]
        return np.asarray(c, dtype=np.float64)

    pts = np.column_stack([col("x"), col("y"), col("z")])
    normals = None
    if has_normals:
        normals = np.column_stack([col("nx"), col("ny"), col("nz")])
        norms = np.linalg.norm(normals, axis=1)
        if len(normals) and (np.abs(norms - 1.0) > 1e-5).any():
            raise FormatError(f"{path}: normals are not unit length")
        normals = normals / np.where(norms > 0, norms, 1.0)[:, None]
    return PointCloud(pts, normals)


# --- depth frame container ---------------------------------------------------


def write_depth_pair(frame: DepthFrame, meta_path, raw_path) -> None:
    intr = frame.intrinsics
    meta = {
        "width": intr.width,
        "height": intr.height,
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "depth_scale": intr.depth_scale,
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2) + "\n")
    Path(raw_path).write_bytes(frame.depth.astype("<u2").tobytes())


def read_depth_pair(meta_path, raw_path) -> DepthFrame:
    meta_path, raw_path = Path(meta_path), Path(raw_path)
    try:
        meta = json.loads(meta_path.read_text())
        intr = CameraIntrinsics(
            width=int(meta["width"]),
            height=int(meta["height"]),
            fx=float(meta["fx"]),
            fy=float(meta["fy"]),
            cx=float(meta["cx"]),
            cy=float(meta["cy"]),
            depth_scale=float(meta["depth_scale"]),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"{meta_path}: bad depth metadata: {e}") from None
    raw = raw_path.read_bytes()
    expected = 2 * intr.width * intr.height
    if len(raw) != expected:
        raise FormatError(f"{raw_path}: expected {expected} bytes, got {len(raw)}")
    depth = np.frombuffer(raw, dtype="<u2").reshape(intr.height, intr.width)
    return DepthFrame(intr, depth)


# --- scalar volume container --------------------------------------------------


def write_volume(vol: ScalarVolume, meta_path, raw_path) -> None:
    meta = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": [float(v) for v in vol.origin],
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2) + "\n")
    Path(raw_path).write_bytes(vol.values.astype("<f4").tobytes())


def read_volume(meta_path, raw_path) -> ScalarVolume:
    meta_path, raw_path = Path(meta_path), Path(raw_path)
    try:
        meta = json.loads(meta_path.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing"])
        origin = [float(v) for v in meta["origin"]]
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"{meta_path}: bad volume metadata: {e}") from None
    raw = raw_path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise FormatError(f"{raw_path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return ScalarVolume(dims, spacing, origin, values)
