import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcp.core import LabeledDataset, Rng, SizeError, SplitSpec, split_calibration, split_dataset


def make_data(n, p=1, d=1, seed=0):
    rng = Rng(seed)
    return LabeledDataset(rng.normal(size=(n, p)), rng.normal(size=(n, d)))


def test_split_sizes_small():
    data = make_data(100)
    tr, cal, te = split_dataset(data, SplitSpec(20, 0.7, 0))
    assert (tr.n, cal.n, te.n) == (56, 20, 24)


def test_split_sizes_benchmark_scale():
    # floor((10000 - 2048) * 0.7) = 5566 train, remainder 2386 test
    data = make_data(10000)
    tr, cal, te = split_dataset(data, SplitSpec(2048, 0.7, 3))
    assert (tr.n, cal.n, te.n) == (5566, 2048, 2386)


def test_split_deterministic():
    data = make_data(200)
    a = split_dataset(data, SplitSpec(50, 0.7, 9))
    b = split_dataset(data, SplitSpec(50, 0.7, 9))
    for part_a, part_b in zip(a, b):
        np.testing.assert_array_equal(part_a.x, part_b.x)
        np.testing.assert_array_equal(part_a.y, part_b.y)


def test_split_too_small():
    with pytest.raises(SizeError):
        split_dataset(make_data(20), SplitSpec(19, 0.7, 0))


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(10, 300),
    cal=st.integers(2, 50),
    frac=st.floats(0.2, 0.8),
    seed=st.integers(0, 2**32 - 1),
)
def test_split_partition_property(n, cal, frac, seed):
    if n < cal + 4:
        return
    data = make_data(n, seed=1)
    tr, c, te = split_dataset(data, SplitSpec(cal, frac, seed))
    assert tr.n + c.n + te.n == n
    rows = np.concatenate([tr.x[:, 0], c.x[:, 0], te.x[:, 0]])
    np.testing.assert_allclose(np.sort(rows), np.sort(data.x[:, 0]))


def test_tau_split_half_of_2048():
    cal = make_data(2048)
    d_tau, d_prop = split_calibration(cal, 0.5, Rng(0))
    assert (d_tau.n, d_prop.n) == (1024, 1024)


def test_tau_split_round_half_up():
    cal = make_data(3)
    d_tau, d_prop = split_calibration(cal, 0.5, Rng(0))
    assert (d_tau.n, d_prop.n) == (2, 1)


def test_tau_split_empty_half():
    with pytest.raises(SizeError):
        split_calibration(make_data(2), 0.1, Rng(0))


def test_tau_split_multiset_stable_under_row_order():
    cal = make_data(40, seed=2)
    shuffled = cal.subset(Rng(5).permutation(40))
    a_tau, a_prop = split_calibration(cal, 0.5, Rng(7))
    b_tau, b_prop = split_calibration(shuffled, 0.5, Rng(7))
    # same sizes per side regardless of input order
    assert a_tau.n == b_tau.n and a_prop.n == b_prop.n
    # and each split is a genuine partition of the same multiset
    np.testing.assert_allclose(
        np.sort(np.concatenate([a_tau.y[:, 0], a_prop.y[:, 0]])),
        np.sort(np.concatenate([b_tau.y[:, 0], b_prop.y[:, 0]])),
    )


def test_rng_reproducible_and_children_distinct():
    a = Rng(123).normal(size=5)
    b = Rng(123).normal(size=5)
    np.testing.assert_array_equal(a, b)
    c = Rng(123).child(1).normal(size=5)
    assert not np.allclose(a, c)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.ones((3, 1)), np.ones((4, 1)))
    with pytest.raises(ValueError):
        LabeledDataset(np.array([[np.nan]]), np.array([[1.0]]))


def test_dataset_immutable():
    data = make_data(5)
    with pytest.raises(ValueError):
        data.x[0, 0] = 3.0
