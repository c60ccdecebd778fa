"""Procedural furniture-like objects with part labels, scan corruption, and manifests.

Objects are assembled from boxes and (hollow) cylinders laid out on the
voxel lattice of the canonical frame (front faces -z, y is up). The observed
sample is rasterized by sampling voxel centres through the inverse rotation,
so the canonical and rotated part masks come from the same analytic geometry.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .taxonomy import PartTreeTarget, Taxonomy, default_taxonomy, validate_tree
from .voxelgrid import (
    N_ANGLE_BINS,
    OccupancyGrid,
    _COS_SIN,
    load_grid,
    occupied_centers,
    save_grid,
    voxelize_points,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains(self, x, y, z):
        return (
            (x >= self.lo[0]) & (x < self.hi[0])
            & (y >= self.lo[1]) & (y < self.hi[1])
            & (z >= self.lo[2]) & (z < self.hi[2])
        )


@dataclass(frozen=True)
class Cylinder:
    """Vertical (hollow when ``r_in > 0``) cylinder in continuous voxel units."""

    cx: float
    cz: float
    r_out: float
    r_in: float
    y0: float
    y1: float

    def contains(self, x, y, z):
        d2 = (x - self.cx) ** 2 + (z - self.cz) ** 2
        return (d2 < self.r_out ** 2) & (d2 >= self.r_in ** 2) & (y >= self.y0) & (y < self.y1)


@dataclass
class PartSpec:
    type_name: str
    primitives: list


@dataclass(frozen=True)
class CorruptionParams:
    crop_prob: float = 0.0
    crop_depth: float = 0.0
    part_drop: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("crop_prob", "crop_depth", "part_drop", "dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def is_identity(self) -> bool:
        return self.crop_prob == 0 and self.part_drop == 0 and self.dropout == 0


DEFAULT_CORRUPTION = CorruptionParams(crop_prob=0.5, crop_depth=0.4, part_drop=0.1, dropout=0.1)


@dataclass
class ObjectSample:
    sample_id: str
    class_name: str
    rotation: int
    scan: OccupancyGrid
    target: PartTreeTarget
    canonical: list[OccupancyGrid]
    seed: int

    @property
    def resolution(self) -> int:
        return self.scan.resolution

    @property
    def complete(self) -> OccupancyGrid:
        m = np.zeros((self.resolution,) * 3, bool)
        for g in self.target.masks:
            m |= g.mask()
        return OccupancyGrid.from_mask(m)

    def __eq__(self, other):
        if not isinstance(other, ObjectSample):
            return NotImplemented
        return (
            (self.sample_id, self.class_name, self.rotation, self.seed)
            == (other.sample_id, other.class_name, other.rotation, other.seed)
            and self.scan == other.scan
            and self.target.types == other.target.types
            and all(a == b for a, b in zip(self.target.masks, other.target.masks))
            and np.array_equal(self.target.adjacency, other.target.adjacency)
            and len(self.canonical) == len(other.canonical)
            and all(a == b for a, b in zip(self.canonical, other.canonical))
        )


# ---------------------------------------------------------------------------
# templates; all lengths in voxels of an R-cube, canonical front is -z


def _v(rng: np.random.Generator, lo: float, hi: float, r: int, minimum: int = 2) -> int:
    return max(minimum, int(round(rng.uniform(lo, hi) * r)))


def _box(x0, x1, y0, y1, z0, z1) -> Box:
    return Box((float(x0), float(y0), float(z0)), (float(x1), float(y1), float(z1)))


def _chair(rng, r):
    c = r // 2
    hw, hd = _v(rng, 0.20, 0.30, r), _v(rng, 0.20, 0.30, r)
    leg_h, seat_t = _v(rng, 0.28, 0.40, r), _v(rng, 0.06, 0.09, r)
    lt, bt = _v(rng, 0.07, 0.07, r), _v(rng, 0.07, 0.07, r)
    seat_top = leg_h + seat_t
    back_h = min(_v(rng, 0.30, 0.45, r), r - 1 - seat_top)
    x0, x1, z0, z1 = c - hw, c + hw, c - hd, c + hd
    n_legs = int(rng.integers(3, 5))
    arms = bool(rng.random() < 0.5)
    arm_h, at = _v(rng, 0.10, 0.18, r), _v(rng, 0.06, 0.06, r)
    if n_legs == 4:
        corners = [(x0, z0), (x1 - lt, z0), (x0, z1 - lt), (x1 - lt, z1 - lt)]
    else:
        corners = [(x0, z0), (x1 - lt, z0), (c - lt // 2, z1 - lt)]
    parts = [
        PartSpec("chair_seat", [_box(x0, x1, leg_h, seat_top, z0, z1)]),
        PartSpec("chair_back", [_box(x0, x1, seat_top, seat_top + back_h, z1 - bt, z1)]),
    ]
    parts += [PartSpec("chair_leg", [_box(x, x + lt, 0, leg_h, z, z + lt)]) for x, z in corners]
    if arms:
        top = min(seat_top + arm_h, r - 1)
        parts.append(PartSpec("chair_arm", [_box(x0, x0 + at, seat_top, top, z0, z1 - bt)]))
        parts.append(PartSpec("chair_arm", [_box(x1 - at, x1, seat_top, top, z0, z1 - bt)]))
    return parts


def _table(rng, r):
    c = r // 2
    hw, hd = _v(rng, 0.22, 0.32, r), _v(rng, 0.18, 0.30, r)
    leg_h, top_t, lt = _v(rng, 0.35, 0.50, r), _v(rng, 0.05, 0.08, r), _v(rng, 0.07, 0.07, r)
    x0, x1, z0, z1 = c - hw, c + hw, c - hd, c + hd
    parts = [PartSpec("table_top", [_box(x0, x1, leg_h, leg_h + top_t, z0, z1)])]
    for x, z in [(x0, z0), (x1 - lt, z0), (x0, z1 - lt), (x1 - lt, z1 - lt)]:
        parts.append(PartSpec("table_leg", [_box(x, x + lt, 0, leg_h, z, z + lt)]))
    dh, dd = _v(rng, 0.08, 0.12, r), _v(rng, 0.12, 0.18, r)
    lo, hi = x0 + lt + 1, x1 - lt - 1
    n_drawers = int(rng.integers(1, 3)) if hi - lo >= 5 else 1
    edges = np.linspace(lo, hi + 1, n_drawers + 1).round().astype(int)
    for a, b in zip(edges[:-1], edges[1:]):
        parts.append(PartSpec("table_drawer", [_box(a, b - 1, leg_h - dh, leg_h, z0, z0 + dd),
                                               _handle((a + b - 1) // 2, leg_h - dh // 2, z0, r)]))
    return parts


def _handle(x, y, z_front, r):
    # square knob standing proud of a front face, scaled with the grid
    h = max(1, int(np.ceil(0.05 * r)))
    return _box(x - h, x + h, y - h, y + h, z_front - 2 * h, z_front)


def _cabinet(rng, r):
    c = r // 2
    hw, hd = _v(rng, 0.20, 0.30, r), _v(rng, 0.15, 0.25, r)
    height, ft, kick = _v(rng, 0.45, 0.85, r), 2, max(2, round(0.1 * r))
    x0, x1, z0, z1 = c - hw, c + hw, c - hd, c + hd
    # toe kick: the frame is recessed behind the fronts at floor level
    parts = [PartSpec("storage_frame", [_box(x0, x1, 0, height, z0 + ft, z1)])]
    n_drawers = int(rng.integers(0, 3))
    dh = _v(rng, 0.10, 0.15, r, minimum=3)
    while n_drawers and height - kick - n_drawers * dh < 4:
        n_drawers -= 1
    door_top = height - n_drawers * dh
    for i in range(n_drawers):
        y0, y1 = door_top + i * dh, door_top + (i + 1) * dh
        parts.append(PartSpec("storage_drawer", [_box(x0, x1, y0, y1, z0, z0 + ft),
                                                 _handle(c, (y0 + y1) // 2, z0, r)]))
    n_doors = int(rng.integers(1, 3))
    edges = np.linspace(x0, x1, n_doors + 1).round().astype(int)
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        hx = b - 3 if i % 2 == 0 else a + 3
        parts.append(PartSpec("storage_door", [_box(a, b, kick, door_top, z0, z0 + ft),
                                               _handle(hx, door_top - 3, z0, r)]))
    return parts


def _bookshelf(rng, r):
    c = r // 2
    hw, hd = _v(rng, 0.20, 0.30, r), _v(rng, 0.12, 0.20, r)
    height, wt = _v(rng, 0.50, 0.90, r), 2
    x0, x1, z0, z1 = c - hw, c + hw, c - hd, c + hd
    frame = [
        _box(x0, x0 + wt, 0, height, z0, z1),
        _box(x1 - wt, x1, 0, height, z0, z1),
        _box(x0 + wt, x1 - wt, 0, wt, z0, z1),
        _box(x0 + wt, x1 - wt, height - wt, height, z0, z1),
        _box(x0 + wt, x1 - wt, wt, height - wt, z1 - wt, z1),
    ]
    parts = [PartSpec("storage_frame", frame)]
    inner = height - 2 * wt
    n_shelves = int(rng.integers(1, 4))
    while n_shelves and inner < (n_shelves + 1) * 4:
        n_shelves -= 1
    for i in range(1, n_shelves + 1):
        y = wt + int(round(i * inner / (n_shelves + 1))) - 1
        parts.append(PartSpec("storage_shelf", [_box(x0 + wt, x1 - wt, y, y + 2, z0, z1 - wt)]))
    return parts


def _bed(rng, r):
    c = r // 2
    hw, hd = _v(rng, 0.18, 0.26, r), _v(rng, 0.28, 0.32, r)
    fh, mh = _v(rng, 0.10, 0.16, r), _v(rng, 0.06, 0.10, r)
    hh, hbt = _v(rng, 0.35, 0.55, r), 2
    x0, x1, z0, z1 = c - hw, c + hw, c - hd, c + hd
    footboard = bool(rng.random() < 0.5)
    zf = z0 + 2 if footboard else z0
    parts = [
        PartSpec("bed_frame", [_box(x0, x1, 0, fh, zf, z1 - hbt)]),
        PartSpec("bed_mattress", [_box(x0, x1, fh, fh + mh, zf, z1 - hbt)]),
        PartSpec("bed_headboard", [_box(x0, x1, 0, hh, z1 - hbt, z1)]),
    ]
    if footboard:
        parts.append(PartSpec("bed_footboard", [_box(x0, x1, 0, fh + mh + _v(rng, 0.04, 0.10, r), z0, zf)]))
    return parts


def _bin(rng, r):
    c = r / 2.0
    rad = rng.uniform(0.18, 0.30) * r
    h = _v(rng, 0.35, 0.60, r)
    parts = [PartSpec("bin_body", [Cylinder(c, c, rad, rad - 2, 0, h), Cylinder(c, c, rad, 0.0, 0, 2)])]
    if rng.random() < 0.6:
        parts.append(PartSpec("bin_lid", [Cylinder(c, c, rad, 0.0, h, h + 2)]))
    pw, pl = _v(rng, 0.08, 0.10, r), _v(rng, 0.12, 0.16, r)
    zc = int(np.floor(c - rad))
    parts.append(PartSpec("bin_pedal", [_box(r // 2 - pw, r // 2 + pw, 0, max(3, round(0.1 * r)), zc - pl, zc + 1)]))
    return parts


TEMPLATES = {
    "chair": _chair,
    "table": _table,
    "cabinet": _cabinet,
    "bookshelf": _bookshelf,
    "bed": _bed,
    "bin": _bin,
}

# (min, max) part counts each template can emit
TEMPLATE_PART_COUNTS = {
    "chair": (5, 8),
    "table": (6, 7),
    "cabinet": (2, 5),
    "bookshelf": (1, 4),
    "bed": (3, 4),
    "bin": (2, 3),
}


def rasterize(primitives: Sequence, resolution: int, rotation: int = 0) -> np.ndarray:
    """Boolean occupancy of voxel centres, sampled through the inverse rotation."""
    cos, sin = _COS_SIN[rotation]
    r = resolution
    centres = np.arange(r, dtype=np.float64) + 0.5
    px, pz = np.meshgrid(centres, centres, indexing="ij")
    half = r / 2.0
    qx = cos * (px - half) - sin * (pz - half) + half
    qz = sin * (px - half) + cos * (pz - half) + half
    qx, qz = qx[:, None, :], qz[:, None, :]
    y = centres[None, :, None]
    out = np.zeros((r, r, r), bool)
    for prim in primitives:
        out |= prim.contains(qx, y, qz)
    return out


def _resolve(masks: list[np.ndarray]) -> list[np.ndarray]:
    claimed = np.zeros_like(masks[0])
    out = []
    for m in masks:
        m = m & ~claimed
        claimed |= m
        out.append(m)
    return out


def adjacency_from_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Parts are adjacent when their one-voxel (26-neighbour) dilations intersect."""
    struct = np.ones((3, 3, 3), bool)
    dil = [ndimage.binary_dilation(m, structure=struct) for m in masks]
    n = len(masks)
    adj = np.zeros((n, n), bool)
    for i in range(n):
        for j in range(i + 1, n):
            adj[i, j] = adj[j, i] = bool(np.any(dil[i] & dil[j]))
    return adj


def generate_shape(class_name: str, taxonomy: Taxonomy, seed: int, resolution: int = 32,
                   rotation: int | None = None, sample_id: str | None = None) -> ObjectSample:
    """One uncorrupted object; ``rotation`` defaults to a uniform random bin."""
    if class_name not in TEMPLATES:
        raise KeyError(f"no template for class {class_name!r}")
    taxonomy.parts_of(class_name)
    rng = np.random.default_rng(seed)
    specs = TEMPLATES[class_name](rng, resolution)
    if rotation is None:
        rotation = int(rng.integers(N_ANGLE_BINS))
    order = sorted(range(len(specs)), key=lambda i: (taxonomy.part_index(specs[i].type_name), i))
    specs = [specs[i] for i in order]
    canon = _resolve([rasterize(s.primitives, resolution, 0) for s in specs])
    seen = _resolve([rasterize(s.primitives, resolution, rotation) for s in specs])
    keep = [i for i in range(len(specs)) if canon[i].any() and seen[i].any()]
    types = [taxonomy.part_index(specs[i].type_name) for i in keep]
    seen = [seen[i] for i in keep]
    target = PartTreeTarget(
        [(t, OccupancyGrid.from_mask(m)) for t, m in zip(types, seen)],
        adjacency_from_masks(seen),
    )
    complete = np.zeros((resolution,) * 3, bool)
    for m in seen:
        complete |= m
    return ObjectSample(
        sample_id=sample_id or f"{class_name}-{seed}",
        class_name=class_name,
        rotation=int(rotation),
        scan=OccupancyGrid.from_mask(complete),
        target=target,
        canonical=[OccupancyGrid.from_mask(canon[i]) for i in keep],
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# corruption


def _corrupt_once(scan: np.ndarray, part_masks: Sequence[np.ndarray], params: CorruptionParams,
                  rng: np.random.Generator) -> np.ndarray:
    r = scan.shape[0]
    # draw every random number unconditionally so paired runs stay aligned
    do_crop = rng.random() < params.crop_prob
    angle = rng.uniform(0.0, 2 * np.pi)
    depth = rng.uniform(0.5, 1.0) * params.crop_depth
    drops = rng.random(len(part_masks)) < params.part_drop
    keep_draw = rng.random(scan.shape)

    out = scan.copy()
    if do_crop and depth > 0 and out.any():
        idx = np.argwhere(out).astype(np.float64)
        normal = np.array([np.cos(angle), 0.0, np.sin(angle)])
        proj = idx @ normal
        cut = proj.max() - depth * (proj.max() - proj.min() + 1.0)
        gone = idx[proj > cut].astype(int)
        out[gone[:, 0], gone[:, 1], gone[:, 2]] = False
    for m, dropped in zip(part_masks, drops):
        if dropped:
            out &= ~m
    if params.dropout > 0:
        out &= keep_draw >= params.dropout
    return out


def corrupt_scan(sample: ObjectSample, params: CorruptionParams, rng: np.random.Generator | None = None,
                 max_attempts: int = 10) -> ObjectSample:
    """Remove scan voxels by half-space crop, whole-part drop and i.i.d. dropout.

    Never adds voxels. Re-rolls an empty result; after ``max_attempts`` the
    fallback keeps only the largest part's voxels from the current scan.
    """
    if params.is_identity:
        return sample
    if rng is None:
        rng = np.random.default_rng([params.seed, sample.seed])
    scan = sample.scan.mask()
    masks = [g.mask() for g in sample.target.masks]
    for _ in range(max_attempts):
        out = _corrupt_once(scan, masks, params, rng)
        if out.any():
            break
    else:
        sizes = [int((scan & m).sum()) for m in masks]
        out = scan & masks[int(np.argmax(sizes))] if masks else scan
    return replace(sample, scan=OccupancyGrid.from_mask(out))


def jitter_scan(scan: OccupancyGrid, max_fraction: float, rng: np.random.Generator,
                supersample: int = 2) -> OccupancyGrid:
    """Re-voxelize the scan inside a box whose faces move by up to ``max_fraction`` per axis."""
    if max_fraction <= 0:
        return scan
    r = scan.resolution
    lo = rng.uniform(-max_fraction, max_fraction, 3) / 2
    hi = 1.0 + rng.uniform(-max_fraction, max_fraction, 3) / 2
    idx = np.argwhere(scan.mask()).astype(np.float64)
    offs = (np.arange(supersample) + 0.5) / supersample
    sub = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
    pts = ((idx[:, None, :] + sub[None]) / r).reshape(-1, 3)
    return voxelize_points(pts, lo, hi, r)


# ---------------------------------------------------------------------------
# datasets and manifests


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def split_counts(n: int, fractions=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = int(np.floor(fractions[0] * n + 0.5))
    n_val = min(int(np.floor(fractions[1] * n + 0.5)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(ids: Sequence[str], fractions=(0.7, 0.15, 0.15), seed: int = 0) -> dict[str, str]:
    n_train, n_val, _ = split_counts(len(ids), fractions)
    order = np.random.default_rng([int(seed), 7]).permutation(len(ids))
    splits = {}
    for rank, i in enumerate(order):
        splits[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return splits


@dataclass
class Dataset:
    samples: list[ObjectSample]
    splits: dict[str, str]
    taxonomy: Taxonomy
    resolution: int
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ObjectSample]:
        return [s for s in self.samples if self.splits.get(s.sample_id) == name]

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.resolution == other.resolution
            and self.splits == other.splits
            and self.taxonomy.digest() == other.taxonomy.digest()
            and self.samples == other.samples
        )


def generate_dataset(classes: Sequence[str], count: int, seed: int, resolution: int = 32,
                     taxonomy: Taxonomy | None = None,
                     corruption: CorruptionParams | None = None,
                     fractions=(0.7, 0.15, 0.15)) -> Dataset:
    taxonomy = taxonomy or default_taxonomy()
    samples = []
    for i in range(count):
        cls = classes[i % len(classes)]
        s_seed = sample_seed(seed, i)
        sample = generate_shape(cls, taxonomy, s_seed, resolution, sample_id=f"{i:06d}")
        if corruption is not None and not corruption.is_identity:
            sample = corrupt_scan(sample, corruption, np.random.default_rng([corruption.seed, s_seed]))
        violations = validate_tree(sample.target, cls, taxonomy)
        if violations:
            raise AssertionError(f"generated sample {i} invalid: {violations}")
        samples.append(sample)
    splits = assign_splits([s.sample_id for s in samples], fractions, seed)
    meta = {"classes": list(classes), "count": count, "seed": seed}
    if corruption is not None:
        meta["corruption"] = {k: getattr(corruption, k) for k in ("crop_prob", "crop_depth", "part_drop", "dropout", "seed")}
    return Dataset(samples, splits, taxonomy, resolution, meta)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    tax = dataset.taxonomy
    entries = []
    for s in dataset.samples:
        rel = Path("grids") / s.sample_id
        (out / rel).mkdir(exist_ok=True)
        save_grid(s.scan, out / rel / "scan.pfvg")
        parts = []
        for k, ((t, mask), canon) in enumerate(zip(s.target.parts, s.canonical)):
            save_grid(mask, out / rel / f"part{k:02d}.pfvg")
            save_grid(canon, out / rel / f"canon{k:02d}.pfvg")
            parts.append({
                "type": tax.part_types[t],
                "mask": (rel / f"part{k:02d}.pfvg").as_posix(),
                "canonical": (rel / f"canon{k:02d}.pfvg").as_posix(),
            })
        adj = s.target.adjacency
        entries.append({
            "id": s.sample_id,
            "class": s.class_name,
            "rotation": s.rotation,
            "seed": s.seed,
            "split": dataset.splits.get(s.sample_id, "train"),
            "scan": (rel / "scan.pfvg").as_posix(),
            "parts": parts,
            "adjacency": [[int(i), int(j)] for i, j in zip(*np.nonzero(np.triu(adj, 1)))],
        })
    (out / "taxonomy.yaml").write_text(tax.dumps())
    manifest = {
        "version": MANIFEST_VERSION,
        "resolution": dataset.resolution,
        "taxonomy": "taxonomy.yaml",
        "taxonomy_sha256": tax.digest(),
        "meta": dataset.meta,
        "samples": entries,
    }
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, out / MANIFEST_NAME)
    return out / MANIFEST_NAME


class ManifestError(ValueError):
    pass


def read_dataset(path) -> Dataset:
    """Load a dataset from a manifest file or the directory containing one."""
    from .taxonomy import read_taxonomy

    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    root = manifest_path.parent
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {manifest_path}") from None
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')}")
    tax_path = root / doc.get("taxonomy", "taxonomy.yaml")
    taxonomy = read_taxonomy(tax_path) if tax_path.exists() else default_taxonomy()

    def grid(rel):
        p = root / rel
        if not p.exists():
            raise ManifestError(f"missing grid file: {p}")
        return load_grid(p)

    samples, splits = [], {}
    for e in doc["samples"]:
        types = [taxonomy.part_index(p["type"]) for p in e["parts"]]
        masks = [grid(p["mask"]) for p in e["parts"]]
        canon = [grid(p["canonical"]) for p in e["parts"] if p.get("canonical")]
        adj = np.zeros((len(types), len(types)), bool)
        for i, j in e.get("adjacency", []):
            adj[i, j] = adj[j, i] = True
        samples.append(ObjectSample(
            sample_id=e["id"], class_name=e["class"], rotation=int(e["rotation"]),
            scan=grid(e["scan"]), target=PartTreeTarget(list(zip(types, masks)), adj),
            canonical=canon, seed=int(e.get("seed", 0)),
        ))
        splits[e["id"]] = e.get("split", "train")
    return Dataset(samples, splits, taxonomy, int(doc["resolution"]), doc.get("meta", {}))


def canonical_masks_by_type(samples: Iterable[ObjectSample]) -> dict[int, list[OccupancyGrid]]:
    out: dict[int, list[OccupancyGrid]] = {}
    for s in samples:
        for t, g in zip(s.target.types, s.canonical):
            out.setdefault(t, []).append(g)
    return out


def points_from_grid(grid: OccupancyGrid) -> np.ndarray:
    return occupied_centers(grid)
