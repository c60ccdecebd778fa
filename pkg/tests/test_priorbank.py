import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import lloyd_bruteforce
from partforge.priorbank import (
    PriorBank,
    build_prior_bank,
    kmeans_plusplus,
    lloyd,
    sq_distances,
    type_seed,
)
from partforge.voxelgrid import GridFormatError, OccupancyGrid, rotate_grid


def _masks(rng, n, r=8, p=0.3):
    return [OccupancyGrid.from_mask(rng.random((r, r, r)) < p) for _ in range(n)]


def test_k1_centroid_is_mean(rng):
    masks = _masks(rng, 7)
    bank, _ = build_prior_bank({0: masks}, k=1, seed=3)
    mean = np.mean([m.values for m in masks], axis=0, dtype=np.float64)
    assert bank.n_priors(0) == 1
    np.testing.assert_array_equal(bank.centroids[0][0].values, mean.astype(np.float32))


def test_separable_pairs_recovered(rng):
    a, b = _masks(rng, 2)
    bank, asg = build_prior_bank({0: [a, b, a, b]}, k=2, seed=0)
    got = {g.values.tobytes() for g in bank.centroids[0]}
    assert got == {a.values.tobytes(), b.values.tobytes()}
    assert asg.sse[0] == 0.0
    assert sorted(bank.counts[0]) == [2, 2]


def test_matches_bruteforce_lloyd(rng):
    masks = _masks(rng, 12)
    data = np.stack([m.values.ravel() for m in masks]).astype(np.float64)
    bank, asg = build_prior_bank({0: masks}, k=3, seed=5)
    init = kmeans_plusplus(data, 3, np.random.default_rng(type_seed(5, 0)))
    sse, labels, _ = lloyd_bruteforce(data, init)
    assert abs(asg.sse[0] - sse) < 1e-9
    assert asg.labels[0].tolist() == labels


def test_fewer_distinct_masks_than_k(rng):
    a, b = _masks(rng, 2)
    bank, _ = build_prior_bank({0: [a, a, b]}, k=10, seed=0)
    assert bank.n_priors(0) == 2


def test_missing_type_is_omitted_with_warning(rng):
    bank, asg = build_prior_bank({0: _masks(rng, 3), 2: _masks(rng, 3)}, k=2, seed=0, n_types=3)
    assert bank.omitted_types == [1]
    assert any("type 1" in w for w in asg.warnings)
    with pytest.raises(KeyError):
        bank.priors_for(1)


def test_mismatched_resolution_rejected(rng):
    with pytest.raises(ValueError, match="resolution"):
        build_prior_bank({0: _masks(rng, 2, r=4) + _masks(rng, 2, r=8)}, k=2)


def test_k_must_be_positive(rng):
    with pytest.raises(ValueError):
        build_prior_bank({0: _masks(rng, 2)}, k=0)


def test_total_priors_full(rng):
    bank, _ = build_prior_bank({t: _masks(rng, 6) for t in range(3)}, k=4, seed=1)
    assert bank.total_priors == 12


@given(st.integers(2, 14), st.integers(1, 5), st.integers(0, 2 ** 16))
def test_lloyd_invariants(n, k, seed):
    rng = np.random.default_rng(seed)
    data = (rng.random((n, 27)) < 0.4).astype(np.float64)
    k = min(k, len(np.unique(data, axis=0)))
    res = lloyd(data, data[kmeans_plusplus(data, k, rng)])
    hist = np.array(res.sse_history)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))
    # every point sits with its nearest centroid
    d = sq_distances(data, res.centroids)
    assert np.all(d[np.arange(n), res.labels] <= d.min(axis=1) + 1e-9)
    for j in range(len(res.centroids)):
        members = data[res.labels == j]
        if len(members):
            np.testing.assert_allclose(res.centroids[j], members.mean(axis=0), atol=1e-12)
    assert np.all((res.centroids >= 0) & (res.centroids <= 1))


def test_rotation_zero_returns_canonical(rng):
    bank, _ = build_prior_bank({0: _masks(rng, 5)}, k=2, seed=0)
    assert bank.priors_for(0, 0) == bank.centroids[0]


@pytest.mark.parametrize("b", range(8))
def test_rotation_at_retrieval_matches_rotating_centroids(rng, b):
    bank, _ = build_prior_bank({0: _masks(rng, 5)}, k=2, seed=0)
    assert bank.priors_for(0, b) == [rotate_grid(g, b) for g in bank.centroids[0]]
    np.testing.assert_array_equal(bank.prior_stack(0, b)[0], rotate_grid(bank.centroids[0][0], b).values.ravel())


def test_quarter_turn_moves_dominant_voxel():
    r = 6
    m = np.zeros((r, r, r), bool)
    m[1, 2, 4] = True
    bank, _ = build_prior_bank({0: [OccupancyGrid.from_mask(m)]}, k=1, seed=0)
    out = bank.priors_for(0, 2)[0].values
    assert np.unravel_index(np.argmax(out), out.shape) == (4, 2, r - 1 - 1)


def test_roundtrip_with_omitted_type(rng, tmp_path):
    bank, _ = build_prior_bank({0: _masks(rng, 5), 2: _masks(rng, 4)}, k=3, seed=0, n_types=4)
    bank.save(tmp_path / "b.pfpb")
    back = PriorBank.load(tmp_path / "b.pfpb")
    assert back == bank
    assert back.omitted_types == [1, 3]
    assert back.counts == bank.counts
    assert back.to_bytes() == bank.to_bytes()


def test_corrupt_length_field(rng):
    bank, _ = build_prior_bank({0: _masks(rng, 3)}, k=2, seed=0)
    data = bytearray(bank.to_bytes())
    data[14:16] = (9).to_bytes(2, "little")  # type-0 centroid count
    with pytest.raises(GridFormatError):
        PriorBank.from_bytes(bytes(data))
    with pytest.raises(GridFormatError):
        PriorBank.from_bytes(bank.to_bytes()[:-3])


@given(hnp.arrays(np.bool_, (6, 4, 4, 4)), st.integers(0, 100))
def test_seeded_build_is_deterministic(arr, seed):
    masks = [OccupancyGrid.from_mask(a) for a in arr]
    a, _ = build_prior_bank({0: masks}, k=3, seed=seed)
    b, _ = build_prior_bank({0: masks}, k=3, seed=seed)
    assert a.to_bytes() == b.to_bytes()
