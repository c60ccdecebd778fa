import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from partforge.taxonomy import (
    N_CHILDREN,
    PartTreeTarget,
    TaxonomyError,
    load_taxonomy,
    read_taxonomy,
    validate_tree,
)
from partforge.voxelgrid import OccupancyGrid

TOY = """
version: 1
classes: [chair]
part_types:
  - {name: seat, classes: [chair]}
  - {name: back, classes: [chair]}
  - {name: leg, classes: [chair]}
"""


def _tree(types, adjacency=None):
    return PartTreeTarget([(t, OccupancyGrid.zeros(2)) for t in types], adjacency)


def test_default_has_six_classes(taxonomy):
    assert taxonomy.classes == ("chair", "table", "cabinet", "bookshelf", "bed", "bin")


def test_cabinet_and_bookshelf_share_parts(taxonomy):
    assert taxonomy.part_names_of("cabinet") == taxonomy.part_names_of("bookshelf")


def test_every_part_type_has_a_class(taxonomy):
    owned = set().union(*(taxonomy.parts_of(c) for c in taxonomy.classes))
    assert owned == set(range(taxonomy.n_part_types))


def test_toy_taxonomy_counts():
    tax = load_taxonomy(TOY)
    assert tax.n_part_types == 3
    assert tax.part_index("leg") == 2


def test_duplicate_part_rejected():
    doc = TOY + "  - {name: leg, classes: [chair]}\n"
    with pytest.raises(TaxonomyError, match="leg"):
        load_taxonomy(doc)


def test_unknown_class_rejected():
    doc = TOY + "  - {name: wing, classes: [plane]}\n"
    with pytest.raises(TaxonomyError, match="plane"):
        load_taxonomy(doc)


def test_empty_class_rejected():
    with pytest.raises(TaxonomyError, match="no part types"):
        load_taxonomy("classes: [a, b]\npart_types:\n  - {name: x, classes: [a]}\n")


def test_unknown_lookup_raises(taxonomy):
    with pytest.raises(KeyError):
        taxonomy.part_index("propeller")
    with pytest.raises(KeyError):
        taxonomy.class_index("sofa")


def test_roundtrip_preserves_indices(taxonomy, tmp_path):
    path = tmp_path / "t.yaml"
    path.write_text(taxonomy.dumps())
    back = read_taxonomy(path)
    assert back == taxonomy
    assert back.digest() == taxonomy.digest()
    for i, name in enumerate(taxonomy.part_types):
        assert back.part_index(name) == i


def test_empty_tree_is_valid(taxonomy):
    assert validate_tree(_tree([]), "chair", taxonomy) == []


def test_foreign_part_is_one_violation(taxonomy):
    tree = _tree([taxonomy.part_index("chair_seat"), taxonomy.part_index("table_top")])
    out = validate_tree(tree, "chair", taxonomy)
    assert len(out) == 1 and "table_top" in out[0]


def test_eleven_parts_exceed_children(taxonomy):
    out = validate_tree(_tree([taxonomy.part_index("chair_leg")] * 11), "chair", taxonomy)
    assert any(f"exceeds n_children={N_CHILDREN}" in v for v in out)


def test_asymmetric_adjacency(taxonomy):
    a = np.zeros((2, 2), bool)
    a[0, 1] = True
    out = validate_tree(_tree([0, 1], a), "chair", taxonomy)
    assert any("symmetric" in v for v in out)


@given(st.lists(st.integers(0, 17), max_size=12), st.sampled_from(
    ["chair", "table", "cabinet", "bookshelf", "bed", "bin"]))
def test_valid_tree_implies_legal_and_small(taxonomy, types, cls):
    if not validate_tree(_tree(types), cls, taxonomy):
        assert len(types) <= N_CHILDREN
        assert set(types) <= set(taxonomy.parts_of(cls))
