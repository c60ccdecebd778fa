"""Dense cubic occupancy grids, discrete up-axis rotations and ``.pfvg`` I/O.

Grids are indexed ``values[x, y, z]`` with ``y`` as the up (gravity) axis.
Flattening is C order, so ``x`` is the slowest-varying index on disk.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

MAGIC = b"PFVG"
VERSION = 1
HEADER_SIZE = 16
N_ANGLE_BINS = 8
PIPELINE_RESOLUTIONS = (16, 32, 64)

SEMANTICS_BINARY = 0
SEMANTICS_SOFT = 1

_HEADER = struct.Struct("<4sBBH8x")

# exact (cos, sin) for multiples of 45 degrees
_SQ = np.sqrt(0.5)
_COS_SIN = [
    (1.0, 0.0), (_SQ, _SQ), (0.0, 1.0), (-_SQ, _SQ),
    (-1.0, 0.0), (-_SQ, -_SQ), (0.0, -1.0), (_SQ, -_SQ),
]


class GridFormatError(ValueError):
    """Raised when a ``.pfvg`` payload cannot be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Immutable R x R x R grid of values in [0, 1]."""

    values: np.ndarray
    binary: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or not (v.shape[0] == v.shape[1] == v.shape[2]) or v.shape[0] < 1:
            raise ValueError(f"grid must be a non-empty cube, got shape {v.shape}")
        if v.size and (not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("grid values must lie in [0, 1]")
        if self.binary and not np.all((v == 0.0) | (v == 1.0)):
            raise ValueError("binary grid holds values other than 0 and 1")
        if v is self.values or not v.flags.owndata:
            v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, resolution: int) -> "OccupancyGrid":
        return cls(np.zeros((resolution,) * 3, np.float32), binary=True)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "OccupancyGrid":
        return cls(np.asarray(mask, dtype=bool).astype(np.float32), binary=True)

    @classmethod
    def soft(cls, values: np.ndarray) -> "OccupancyGrid":
        return cls(np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0), binary=False)

    def mask(self, threshold: float = 0.5) -> np.ndarray:
        """Boolean occupancy; binary grids ignore ``threshold``."""
        if self.binary:
            return self.values > 0.5
        return self.values > threshold

    def binarize(self, threshold: float = 0.5) -> "OccupancyGrid":
        return OccupancyGrid.from_mask(self.mask(threshold))

    def count(self, threshold: float = 0.5) -> int:
        return int(self.mask(threshold).sum())

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.binary == other.binary
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.binary, self.values.tobytes()))

    def __repr__(self):
        kind = "binary" if self.binary else "soft"
        return f"OccupancyGrid(R={self.resolution}, {kind}, occupied={self.count()})"


def check_bin(index: int) -> int:
    index = int(index)
    if not 0 <= index < N_ANGLE_BINS:
        raise ValueError(f"angle bin must be in [0, {N_ANGLE_BINS}), got {index}")
    return index


def bin_angle_degrees(index: int) -> float:
    return 45.0 * check_bin(index)


def voxelize_points(points, box_min, box_max, resolution: int = 32) -> OccupancyGrid:
    """Half-open binning of points inside ``[box_min, box_max)`` into an R^3 grid."""
    lo = np.asarray(box_min, dtype=np.float64).reshape(3)
    hi = np.asarray(box_max, dtype=np.float64).reshape(3)
    extent = hi - lo
    if not np.all(extent > 0):
        raise ValueError(f"degenerate box: extent {extent.tolist()} must be positive on every axis")
    out = np.zeros((resolution,) * 3, np.float32)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return OccupancyGrid(out, binary=True)
    inside = np.all((pts >= lo) & (pts < hi), axis=1)
    pts = pts[inside]
    idx = np.floor((pts - lo) / extent * resolution).astype(np.int64)
    # (p - lo) / extent can round up to exactly 1.0 just below hi
    idx = np.clip(idx, 0, resolution - 1)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return OccupancyGrid(out, binary=True)


def _rot90(values: np.ndarray, quarter_turns: int) -> np.ndarray:
    # one quarter turn: out[a, y, b] = in[R-1-b, y, a]
    v = values
    for _ in range(quarter_turns % 4):
        v = v[::-1, :, :].transpose(2, 1, 0)
    return np.ascontiguousarray(v)


def rotation_sources(resolution: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Source (x, z) index coordinates sampled by each output voxel for bin ``index``."""
    c, s = _COS_SIN[check_bin(index)]
    centre = (resolution - 1) / 2.0
    u = np.arange(resolution, dtype=np.float64) - centre
    xo, zo = np.meshgrid(u, u, indexing="ij")
    # inverse rotation about +y: x = c*x' - s*z', z = s*x' + c*z'
    xs = c * xo - s * zo + centre
    zs = s * xo + c * zo + centre
    return xs, zs


def rotate_values(values: np.ndarray, index: int) -> np.ndarray:
    """Rotate a raw (R, R, R) array by ``index * 45`` degrees about the y axis."""
    index = check_bin(index)
    if index % 2 == 0:
        return _rot90(values, index // 2)
    r = values.shape[0]
    xs, zs = rotation_sources(r, index)
    ys = np.arange(r, dtype=np.float64)
    coords = np.empty((3, r, r, r))
    coords[0] = xs[:, None, :]
    coords[1] = ys[None, :, None]
    coords[2] = zs[:, None, :]
    out = ndimage.map_coordinates(
        np.asarray(values, dtype=np.float64), coords, order=1, mode="constant", cval=0.0
    )
    return np.clip(out, 0.0, 1.0).astype(values.dtype)


def rotate_grid(grid: OccupancyGrid, index: int) -> OccupancyGrid:
    """Rotate about the vertical axis through the grid centre.

    Even bins permute indices exactly; odd bins resample trilinearly with zero fill.
    """
    index = check_bin(index)
    if index == 0:
        return grid
    values = rotate_values(grid.values, index)
    return OccupancyGrid(values, binary=grid.binary and index % 2 == 0)


def occupied_centers(grid: OccupancyGrid, threshold: float = 0.5) -> np.ndarray:
    """Unit-box centres ``(ijk + 0.5) / R`` of cells above threshold, lexicographic order."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    idx = np.argwhere(grid.values > threshold)
    return (idx.astype(np.float64) + 0.5) / grid.resolution


# ---------------------------------------------------------------------------
# .pfvg I/O


def encode_payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_payload(data: bytes, offset: int, resolution: int) -> np.ndarray:
    n = resolution ** 3 * 4
    if len(data) - offset < n:
        raise GridFormatError(
            f"truncated grid payload: need {n} bytes, have {max(len(data) - offset, 0)}", len(data)
        )
    return np.frombuffer(data, dtype="<f4", count=resolution ** 3, offset=offset).reshape(
        (resolution,) * 3
    ).astype(np.float32)


def grid_to_bytes(grid: OccupancyGrid) -> bytes:
    semantics = SEMANTICS_BINARY if grid.binary else SEMANTICS_SOFT
    return _HEADER.pack(MAGIC, VERSION, semantics, grid.resolution) + encode_payload(grid.values)


def grid_from_bytes(data: bytes) -> OccupancyGrid:
    if len(data) < HEADER_SIZE:
        raise GridFormatError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", len(data))
    magic, version, semantics, resolution = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise GridFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise GridFormatError(f"unsupported version {version}", 4)
    if semantics not in (SEMANTICS_BINARY, SEMANTICS_SOFT):
        raise GridFormatError(f"unknown semantics flag {semantics}", 5)
    if resolution == 0:
        raise GridFormatError("zero resolution", 6)
    values = decode_payload(data, HEADER_SIZE, resolution)
    expected = HEADER_SIZE + resolution ** 3 * 4
    if len(data) != expected:
        raise GridFormatError(f"trailing bytes after payload: {len(data) - expected}", expected)
    try:
        return OccupancyGrid(values, binary=semantics == SEMANTICS_BINARY)
    except ValueError as exc:
        raise GridFormatError(f"invalid grid values: {exc}", HEADER_SIZE) from None


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_grid(grid: OccupancyGrid, path) -> None:
    atomic_write_bytes(path, grid_to_bytes(grid))


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# OBJ export

_CUBE_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
    dtype=np.float64,
)
_CUBE_FACES = [(1, 4, 3, 2), (5, 6, 7, 8), (1, 2, 6, 5), (2, 3, 7, 6), (3, 4, 8, 7), (4, 1, 5, 8)]


def grid_to_obj(grids: OccupancyGrid | Sequence[OccupancyGrid], names: Iterable[str] | None = None,
                threshold: float = 0.5) -> str:
    """ASCII OBJ with one unit cube per occupied voxel, scaled to the unit box.

    Several grids become separate ``o`` groups, handy for per-part colouring.
    """
    if isinstance(grids, OccupancyGrid):
        grids = [grids]
    names = list(names) if names is not None else [f"part{i}" for i in range(len(grids))]
    lines = ["# partforge voxel export"]
    base = 0
    for name, grid in zip(names, grids):
        lines.append(f"o {name}")
        scale = 1.0 / grid.resolution
        for ijk in np.argwhere(grid.mask(threshold)):
            for corner in (_CUBE_CORNERS + ijk) * scale:
                lines.append("v {:.6f} {:.6f} {:.6f}".format(*corner))
            for face in _CUBE_FACES:
                lines.append("f " + " ".join(str(base + f) for f in face))
            base += 8
    return "\n".join(lines) + "\n"
