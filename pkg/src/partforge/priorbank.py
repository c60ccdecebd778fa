"""Geometric part priors: k-means centroids of canonical-space part masks.

Each part type is clustered independently with Lloyd's algorithm on flattened
R^3 mask vectors. Centroids stay soft (cluster means) and are rotated into
the observed frame only when retrieved.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .voxelgrid import (
    GridFormatError,
    OccupancyGrid,
    atomic_write_bytes,
    check_bin,
    decode_payload,
    encode_payload,
    rotate_grid,
)

MAGIC = b"PFPB"
VERSION = 1
MAX_ITER = 100

_HEAD = struct.Struct("<4sBxHHH")
_TYPE_HEAD = struct.Struct("<HH")


@dataclass
class LloydResult:
    centroids: np.ndarray  # (k, d) float64
    labels: np.ndarray  # (n,)
    sse: float
    sse_history: list[float]
    n_iter: int


def sq_distances(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, clamped at zero."""
    d = (
        np.einsum("ij,ij->i", data, data)[:, None]
        - 2.0 * data @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d, 0.0)


def kmeans_plusplus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns indices of the chosen seed rows."""
    n = len(data)
    chosen = [int(rng.integers(n))]
    closest = sq_distances(data, data[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point coincides with a seed; fall back to the first unused row
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, sq_distances(data, data[nxt : nxt + 1])[:, 0])
    return np.asarray(chosen)


def lloyd(data: np.ndarray, init: np.ndarray, max_iter: int = MAX_ITER) -> LloydResult:
    """Lloyd iterations from initial centroids until the assignment stops changing.

    Empty clusters are re-seeded with the point farthest from its centroid.
    SSE is asserted non-increasing after every update.
    """
    data = np.asarray(data, dtype=np.float64)
    centroids = np.array(init, dtype=np.float64)
    k = len(centroids)
    labels = np.argmin(sq_distances(data, centroids), axis=1)
    history = [float(sq_distances(data, centroids)[np.arange(len(data)), labels].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = data[members].mean(axis=0)
        dist = sq_distances(data, centroids)
        new_labels = np.argmin(dist, axis=1)
        for j in range(k):
            if not np.any(new_labels == j):
                own = dist[np.arange(len(data)), new_labels]
                far = int(np.argmax(own))
                centroids[j] = data[far]
                new_labels[far] = j
                dist = sq_distances(data, centroids)
        sse = float(dist[np.arange(len(data)), new_labels].sum())
        assert sse <= history[-1] + 1e-9 * max(1.0, history[-1]), "k-means SSE increased"
        history.append(sse)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    for j in range(k):
        members = labels == j
        if members.any():
            centroids[j] = data[members].mean(axis=0)
    sse = float(((data - centroids[labels]) ** 2).sum())
    return LloydResult(centroids, labels, sse, history, n_iter)


def kmeans(data: np.ndarray, k: int, seed) -> LloydResult:
    data = np.asarray(data, dtype=np.float64)
    rng = np.random.default_rng(seed)
    distinct = len(np.unique(data, axis=0))
    k = min(k, distinct)
    init = data[kmeans_plusplus(data, k, rng)]
    return lloyd(data, init)


@dataclass
class ClusterAssignment:
    labels: dict[int, np.ndarray] = field(default_factory=dict)
    sse: dict[int, float] = field(default_factory=dict)
    sse_history: dict[int, list[float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


@dataclass
class PriorBank:
    resolution: int
    k: int
    n_types: int
    centroids: dict[int, list[OccupancyGrid]]
    counts: dict[int, list[int]]
    _rotated: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for t, grids in self.centroids.items():
            for g in grids:
                if g.resolution != self.resolution:
                    raise ValueError(f"type {t}: centroid resolution {g.resolution} != {self.resolution}")

    @property
    def present_types(self) -> list[int]:
        return sorted(t for t, c in self.centroids.items() if c)

    @property
    def omitted_types(self) -> list[int]:
        return [t for t in range(self.n_types) if not self.centroids.get(t)]

    def n_priors(self, part_type: int) -> int:
        return len(self.centroids.get(part_type, []))

    @property
    def total_priors(self) -> int:
        return sum(len(c) for c in self.centroids.values())

    def offsets(self) -> dict[int, int]:
        """Start column of each type's priors in a width ``n_types * k`` weight head."""
        return {t: t * self.k for t in range(self.n_types)}

    def priors_for(self, part_type: int, rotation: int = 0) -> list[OccupancyGrid]:
        if not self.centroids.get(part_type):
            raise KeyError(f"part type {part_type} has no priors in this bank")
        rotation = check_bin(rotation)
        key = (part_type, rotation)
        if key not in self._rotated:
            self._rotated[key] = [rotate_grid(g, rotation) for g in self.centroids[part_type]]
        return self._rotated[key]

    def prior_stack(self, part_type: int, rotation: int = 0) -> np.ndarray:
        """(M_t, R^3) float32 matrix of rotated priors."""
        key = ("stack", part_type, rotation)
        if key not in self._rotated:
            grids = self.priors_for(part_type, rotation)
            stack = np.stack([g.values.reshape(-1) for g in grids])
            stack.setflags(write=False)
            self._rotated[key] = stack
        return self._rotated[key]

    def __eq__(self, other):
        if not isinstance(other, PriorBank):
            return NotImplemented
        return (
            (self.resolution, self.k, self.n_types) == (other.resolution, other.k, other.n_types)
            and self.present_types == other.present_types
            and all(self.counts[t] == other.counts[t] for t in self.present_types)
            and all(self.centroids[t] == other.centroids[t] for t in self.present_types)
        )

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [_HEAD.pack(MAGIC, VERSION, self.resolution, self.k, self.n_types)]
        for t in range(self.n_types):
            grids = self.centroids.get(t, [])
            out.append(_TYPE_HEAD.pack(t, len(grids)))
            out.append(struct.pack(f"<{len(grids)}I", *self.counts.get(t, [])))
            for g in grids:
                out.append(encode_payload(g.values))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PriorBank":
        if len(data) < _HEAD.size:
            raise GridFormatError("truncated prior bank header", len(data))
        magic, version, resolution, k, n_types = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise GridFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise GridFormatError(f"unsupported version {version}", 4)
        pos = _HEAD.size
        centroids, counts = {}, {}
        payload = resolution ** 3 * 4
        for expect in range(n_types):
            if len(data) - pos < _TYPE_HEAD.size:
                raise GridFormatError(f"truncated record for type {expect}", pos)
            t, m = _TYPE_HEAD.unpack_from(data, pos)
            if t != expect or m > k:
                raise GridFormatError(f"corrupt type record (type {t}, count {m})", pos)
            pos += _TYPE_HEAD.size
            need = 4 * m + payload * m
            if len(data) - pos < need:
                raise GridFormatError(f"truncated priors for type {t}: need {need} bytes", pos)
            counts[t] = list(struct.unpack_from(f"<{m}I", data, pos))
            pos += 4 * m
            grids = []
            for _ in range(m):
                grids.append(OccupancyGrid(decode_payload(data, pos, resolution), binary=False))
                pos += payload
            centroids[t] = grids
        if pos != len(data):
            raise GridFormatError(f"{len(data) - pos} trailing bytes", pos)
        return cls(resolution, k, n_types, centroids, counts)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "PriorBank":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def type_seed(seed: int, part_type: int) -> list[int]:
    return [int(seed), int(part_type)]


def build_prior_bank(
    masks_by_type: Mapping[int, Sequence[OccupancyGrid]],
    k: int = 10,
    seed: int = 0,
    n_types: int | None = None,
) -> tuple[PriorBank, ClusterAssignment]:
    """Cluster canonical part masks per type into at most ``k`` soft priors."""
    if k < 1:
        raise ValueError("K must be >= 1")
    resolutions = {g.resolution for masks in masks_by_type.values() for g in masks}
    if len(resolutions) > 1:
        raise ValueError(f"mismatched mask resolutions: {sorted(resolutions)}")
    if not resolutions:
        raise ValueError("no masks given")
    resolution = resolutions.pop()
    if n_types is None:
        n_types = max(masks_by_type) + 1

    assignment = ClusterAssignment()
    centroids: dict[int, list[OccupancyGrid]] = {}
    counts: dict[int, list[int]] = {}
    for t in range(n_types):
        masks = masks_by_type.get(t, [])
        if not masks:
            assignment.warnings.append(f"part type {t} has no training masks; omitted")
            centroids[t], counts[t] = [], []
            continue
        data = np.stack([g.values.reshape(-1) for g in masks]).astype(np.float64)
        res = kmeans(data, k, type_seed(seed, t))
        centroids[t] = [
            OccupancyGrid.soft(c.reshape((resolution,) * 3)) for c in res.centroids
        ]
        counts[t] = np.bincount(res.labels, minlength=len(res.centroids)).tolist()
        assignment.labels[t] = res.labels
        assignment.sse[t] = res.sse
        assignment.sse_history[t] = res.sse_history
    return PriorBank(resolution, k, n_types, centroids, counts), assignment
