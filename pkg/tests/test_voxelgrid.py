import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from partforge.voxelgrid import (
    GridFormatError,
    OccupancyGrid,
    check_bin,
    grid_from_bytes,
    grid_to_bytes,
    grid_to_obj,
    load_grid,
    occupied_centers,
    rotate_grid,
    rotation_sources,
    save_grid,
    voxelize_points,
)


def binary_grids(max_r=8):
    return st.integers(1, max_r).flatmap(
        lambda r: hnp.arrays(np.bool_, (r, r, r)).map(OccupancyGrid.from_mask)
    )


def soft_grids(max_r=8):
    floats = st.floats(0.0, 1.0, width=32, allow_nan=False)
    return st.integers(1, max_r).flatmap(
        lambda r: hnp.arrays(np.float32, (r, r, r), elements=floats).map(OccupancyGrid.soft)
    )


# --- construction -----------------------------------------------------------

def test_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        OccupancyGrid(np.full((2, 2, 2), 1.5, np.float32), binary=False)
    with pytest.raises(ValueError):
        OccupancyGrid(np.full((2, 2, 2), 0.5, np.float32), binary=True)
    with pytest.raises(ValueError):
        OccupancyGrid(np.zeros((2, 3, 2), np.float32))


def test_grid_is_immutable():
    g = OccupancyGrid.zeros(4)
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0


def test_check_bin_bounds():
    assert check_bin(7) == 7
    for bad in (-1, 8):
        with pytest.raises(ValueError):
            check_bin(bad)


# --- voxelize_points ------------------------------------------------------------

def test_center_point_lands_in_upper_cell():
    g = voxelize_points([[0.5, 0.5, 0.5]], [0, 0, 0], [1, 1, 1], 2)
    assert g.count() == 1
    assert g.values[1, 1, 1] == 1.0


def test_empty_points_give_empty_grid():
    assert voxelize_points(np.zeros((0, 3)), [0, 0, 0], [1, 1, 1], 4).count() == 0


def test_max_corner_is_excluded():
    g = voxelize_points([[1.0, 1.0, 1.0], [2.0, 0.5, 0.5]], [0, 0, 0], [1, 1, 1], 4)
    assert g.count() == 0


def test_degenerate_box_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        voxelize_points([[0, 0, 0]], [0, 0, 0], [1, 0, 1], 4)


def test_voxelize_matches_per_point_loop(rng):
    lo, hi = np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 2.5])
    pts = rng.uniform(lo - 0.2, hi + 0.2, size=(1000, 3))
    got = voxelize_points(pts, lo, hi, 4)
    want = np.zeros((4, 4, 4), np.float32)
    for p in pts:
        if all(lo[a] <= p[a] < hi[a] for a in range(3)):
            cell = [min(int((p[a] - lo[a]) / (hi[a] - lo[a]) * 4), 3) for a in range(3)]
            want[tuple(cell)] = 1.0
    np.testing.assert_array_equal(got.values, want)


@given(st.lists(st.tuples(*[st.floats(0, 1, exclude_max=True)] * 3), max_size=40), st.randoms())
def test_voxelize_permutation_invariant(points, rnd):
    shuffled = list(points)
    rnd.shuffle(shuffled)
    a = voxelize_points(np.array(points).reshape(-1, 3), [0, 0, 0], [1, 1, 1], 5)
    b = voxelize_points(np.array(shuffled).reshape(-1, 3), [0, 0, 0], [1, 1, 1], 5)
    assert a == b


# --- rotation ------------------------------------------------------------------

@given(soft_grids())
def test_rotation_zero_is_identity(g):
    assert rotate_grid(g, 0) is g


@given(binary_grids())
def test_four_quarter_turns_compose_to_identity(g):
    out = g
    for _ in range(4):
        out = rotate_grid(out, 2)
    assert out == g


@given(binary_grids(), st.sampled_from([2, 4, 6]))
def test_quarter_turns_preserve_count(g, b):
    assert rotate_grid(g, b).count() == g.count()


@given(binary_grids(), st.sampled_from([2, 4, 6]), st.sampled_from([2, 4, 6]))
def test_quarter_turns_compose_additively(g, a, b):
    assert rotate_grid(rotate_grid(g, a), b) == rotate_grid(g, (a + b) % 8)


def test_quarter_turn_matches_coordinate_oracle():
    r = 7
    c = (r - 1) / 2
    for i, j, k in [(0, 3, 1), (5, 0, 6), (2, 6, 2)]:
        m = np.zeros((r, r, r), bool)
        m[i, j, k] = True
        out = rotate_grid(OccupancyGrid.from_mask(m), 2)
        # continuous +90 deg about y maps (x, z) -> (z, -x) around the centre
        x, z = i - c, k - c
        want = (int(round(z + c)), j, int(round(-x + c)))
        assert out.count() == 1
        assert out.values[want] == 1.0


@pytest.mark.parametrize("b", range(8))
def test_exact_bins_agree_with_interpolated_route(b, rng):
    # the permutation path and trilinear sampling must describe the same rotation
    r = 6
    v = rng.random((r, r, r)).astype(np.float32)
    xs, zs = rotation_sources(r, b)
    coords = np.stack([
        np.broadcast_to(xs[:, None, :], (r, r, r)),
        np.broadcast_to(np.arange(r, dtype=float)[None, :, None], (r, r, r)),
        np.broadcast_to(zs[:, None, :], (r, r, r)),
    ])
    want = ndimage.map_coordinates(v.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
    got = rotate_grid(OccupancyGrid.soft(v), b).values
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_odd_bins_are_soft_and_bounded(rng):
    g = OccupancyGrid.from_mask(rng.random((8, 8, 8)) > 0.5)
    out = rotate_grid(g, 1)
    assert not out.binary
    assert out.values.min() >= 0.0 and out.values.max() <= 1.0


def test_eighth_turns_pairwise_match_quarter_turn_on_symmetric_blob():
    r = 9
    u = np.arange(r) - 4
    x, y, z = np.meshgrid(u, u, u, indexing="ij")
    ball = OccupancyGrid.from_mask(x ** 2 + y ** 2 + z ** 2 <= 9)
    twice = rotate_grid(rotate_grid(ball, 1), 1).binarize()
    assert abs(twice.count() - ball.count()) <= 8


# --- occupied_centers ---------------------------------------------------------------

def test_centers_of_empty_grid():
    assert occupied_centers(OccupancyGrid.zeros(3)).shape == (0, 3)


def test_center_of_single_cell():
    m = np.zeros((2, 2, 2), bool)
    m[0, 0, 0] = True
    np.testing.assert_array_equal(occupied_centers(OccupancyGrid.from_mask(m)), [[0.25, 0.25, 0.25]])


@given(soft_grids(), st.floats(0.01, 0.99))
def test_centers_match_cell_scan(g, t):
    r = g.resolution
    want = [((i + 0.5) / r, (j + 0.5) / r, (k + 0.5) / r)
            for i in range(r) for j in range(r) for k in range(r) if g.values[i, j, k] > t]
    got = occupied_centers(g, t)
    assert len(got) == int((g.values > t).sum())
    np.testing.assert_array_equal(got.reshape(-1, 3), np.array(want).reshape(-1, 3))


def test_centers_threshold_must_be_open_interval():
    with pytest.raises(ValueError):
        occupied_centers(OccupancyGrid.zeros(2), 1.0)


# --- I/O ----------------------------------------------------------------------------

@given(st.one_of(binary_grids(), soft_grids()))
def test_bytes_roundtrip(g):
    data = grid_to_bytes(g)
    back = grid_from_bytes(data)
    assert back == g
    assert grid_to_bytes(back) == data


def test_file_roundtrip_soft_32(tmp_path, rng):
    g = OccupancyGrid.soft(rng.random((32, 32, 32)))
    save_grid(g, tmp_path / "a.pfvg")
    assert load_grid(tmp_path / "a.pfvg") == g
    assert (tmp_path / "a.pfvg").stat().st_size == 16 + 32 ** 3 * 4


def test_file_roundtrip_binary_16(tmp_path, rng):
    g = OccupancyGrid.from_mask(rng.random((16, 16, 16)) > 0.7)
    save_grid(g, tmp_path / "b.pfvg")
    back = load_grid(tmp_path / "b.pfvg")
    assert back == g and back.binary


def test_header_layout():
    data = grid_to_bytes(OccupancyGrid.zeros(3))
    assert data[:4] == b"PFVG"
    assert struct.unpack_from("<BBH", data, 4) == (1, 0, 3)
    assert data[8:16] == bytes(8)


def test_wrong_magic_names_offset():
    data = bytearray(grid_to_bytes(OccupancyGrid.zeros(2)))
    data[:4] = b"XXXX"
    with pytest.raises(GridFormatError) as e:
        grid_from_bytes(bytes(data))
    assert e.value.offset == 0
    assert "byte offset 0" in str(e.value)


def test_truncated_payload_names_offset():
    data = grid_to_bytes(OccupancyGrid.zeros(4))
    with pytest.raises(GridFormatError) as e:
        grid_from_bytes(data[:-5])
    assert e.value.offset == len(data) - 5


def test_truncated_header():
    with pytest.raises(GridFormatError, match="header"):
        grid_from_bytes(b"PFVG")


def test_non_binary_payload_in_binary_file():
    data = bytearray(grid_to_bytes(OccupancyGrid.zeros(2)))
    data[16:20] = struct.pack("<f", 0.5)
    with pytest.raises(GridFormatError):
        grid_from_bytes(bytes(data))


def test_obj_export_counts():
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[2, 1, 0] = True
    text = grid_to_obj([OccupancyGrid.from_mask(m), OccupancyGrid.zeros(3)], ["a", "b"])
    lines = text.splitlines()
    assert sum(ln.startswith("v ") for ln in lines) == 16
    assert sum(ln.startswith("f ") for ln in lines) == 12
    assert "o a" in lines and "o b" in lines
    verts = np.array([[float(t) for t in ln.split()[1:]] for ln in lines if ln.startswith("v ")])
    assert verts.min() >= 0.0 and verts.max() <= 1.0
