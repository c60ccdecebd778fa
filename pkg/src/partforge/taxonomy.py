"""Object classes, part types and part-tree validation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import numpy as np
import yaml

from .voxelgrid import OccupancyGrid

N_CHILDREN = 10
TAXONOMY_VERSION = 1


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    classes: tuple[str, ...]
    part_types: tuple[str, ...]
    class_parts: dict[str, tuple[int, ...]]
    # per class: set of allowed (i, j) global-index pairs with i < j; None means unrestricted
    adjacency_allowed: dict[str, frozenset | None] = field(default_factory=dict)

    @property
    def n_part_types(self) -> int:
        return len(self.part_types)

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def part_index(self, name: str) -> int:
        try:
            return self.part_types.index(name)
        except ValueError:
            raise KeyError(f"unknown part type {name!r}") from None

    def parts_of(self, class_name: str) -> tuple[int, ...]:
        if class_name not in self.class_parts:
            raise KeyError(f"unknown class {class_name!r}")
        return self.class_parts[class_name]

    def part_names_of(self, class_name: str) -> list[str]:
        return [self.part_types[i] for i in self.parts_of(class_name)]

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "version": TAXONOMY_VERSION,
            "classes": list(self.classes),
            "part_types": [
                {"name": p, "classes": [c for c in self.classes if i in self.class_parts[c]]}
                for i, p in enumerate(self.part_types)
            ],
        }
        adjacency = {
            c: sorted([self.part_types[a], self.part_types[b]] for a, b in pairs)
            for c, pairs in self.adjacency_allowed.items()
            if pairs is not None
        }
        if adjacency:
            doc["adjacency"] = adjacency
        return doc

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_document(), sort_keys=False)

    def digest(self) -> str:
        canon = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_taxonomy(document: str | dict) -> Taxonomy:
    """Build a validated :class:`Taxonomy` from YAML text or an already-parsed mapping."""
    doc = yaml.safe_load(document) if isinstance(document, str) else document
    if not isinstance(doc, dict):
        raise TaxonomyError("taxonomy document must be a mapping")
    version = doc.get("version", TAXONOMY_VERSION)
    if version != TAXONOMY_VERSION:
        raise TaxonomyError(f"unsupported taxonomy version {version}")

    classes = [str(c) for c in doc.get("classes") or []]
    if not classes:
        raise TaxonomyError("taxonomy declares no classes")
    seen = set()
    for c in classes:
        if c in seen:
            raise TaxonomyError(f"duplicate class {c!r}")
        seen.add(c)

    part_types: list[str] = []
    members: dict[str, list[int]] = {c: [] for c in classes}
    for entry in doc.get("part_types") or []:
        if isinstance(entry, str):
            raise TaxonomyError(f"part type {entry!r} lists no classes")
        name = str(entry["name"])
        if name in part_types:
            raise TaxonomyError(f"duplicate part type {name!r}")
        owners = entry.get("classes") or []
        if not owners:
            raise TaxonomyError(f"part type {name!r} belongs to no class")
        for c in owners:
            if c not in members:
                raise TaxonomyError(f"part type {name!r} references unknown class {c!r}")
            members[c].append(len(part_types))
        part_types.append(name)

    for c, idx in members.items():
        if not idx:
            raise TaxonomyError(f"class {c!r} has no part types")

    adjacency: dict[str, frozenset | None] = {c: None for c in classes}
    for c, pairs in (doc.get("adjacency") or {}).items():
        if c not in members:
            raise TaxonomyError(f"adjacency references unknown class {c!r}")
        allowed = set()
        for a, b in pairs:
            try:
                ia, ib = part_types.index(a), part_types.index(b)
            except ValueError:
                raise TaxonomyError(f"adjacency pair ({a}, {b}) names an unknown part type") from None
            allowed.add((min(ia, ib), max(ia, ib)))
        adjacency[c] = frozenset(allowed)

    return Taxonomy(
        classes=tuple(classes),
        part_types=tuple(part_types),
        class_parts={c: tuple(v) for c, v in members.items()},
        adjacency_allowed=adjacency,
    )


def default_taxonomy() -> Taxonomy:
    text = resources.files("partforge").joinpath("data/default_taxonomy.yaml").read_text()
    return load_taxonomy(text)


def read_taxonomy(path) -> Taxonomy:
    with open(path) as fh:
        return load_taxonomy(fh.read())


@dataclass
class PartTreeTarget:
    """Flattened one-level part tree: (type index, mask) per part plus adjacency."""

    parts: list[tuple[int, OccupancyGrid]]
    adjacency: np.ndarray = None

    def __post_init__(self):
        n = len(self.parts)
        if self.adjacency is None:
            self.adjacency = np.zeros((n, n), dtype=bool)
        self.adjacency = np.asarray(self.adjacency, dtype=bool)

    @property
    def types(self) -> list[int]:
        return [t for t, _ in self.parts]

    @property
    def masks(self) -> list[OccupancyGrid]:
        return [m for _, m in self.parts]

    def __len__(self):
        return len(self.parts)


def validate_tree(tree: PartTreeTarget, class_name: str, taxonomy: Taxonomy) -> list[str]:
    """Return a list of violations; an empty list means the tree is valid."""
    violations = []
    legal = set(taxonomy.parts_of(class_name))
    if len(tree.parts) > N_CHILDREN:
        violations.append(f"{len(tree.parts)} parts exceeds n_children={N_CHILDREN}")
    for i, t in enumerate(tree.types):
        if not 0 <= t < taxonomy.n_part_types:
            violations.append(f"part {i}: type index {t} out of range")
        elif t not in legal:
            violations.append(f"part {i}: type {taxonomy.part_types[t]!r} illegal for class {class_name!r}")
    adj = tree.adjacency
    n = len(tree.parts)
    if adj.shape != (n, n):
        violations.append(f"adjacency shape {adj.shape} does not match {n} parts")
    else:
        if not np.array_equal(adj, adj.T):
            violations.append("adjacency matrix is not symmetric")
        if adj.diagonal().any():
            violations.append("adjacency matrix has a true diagonal entry")
        allowed = taxonomy.adjacency_allowed.get(class_name)
        if allowed is not None:
            types = tree.types
            for i, j in zip(*np.nonzero(np.triu(adj, 1))):
                a, b = sorted((types[i], types[j]))
                if (a, b) not in allowed:
                    violations.append(f"parts {i},{j}: adjacency {taxonomy.part_types[a]}-"
                                      f"{taxonomy.part_types[b]} not allowed")
    return violations
