import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sansaw.kmeans import RegionConfig, kmeans_1d, kmeans_1d_batch, top_cluster_mask, top_cluster_masks

from oracles import dp_kmeans


def lloyd_cost(values, res):
    x = np.asarray(values, dtype=np.float64)
    return float(((x - res.centers[res.labels]) ** 2).sum())


def test_spec_example():
    res = kmeans_1d([0.1, 0.2, 0.9, 1.0], 2)
    assert res.labels.tolist() == [0, 0, 1, 1]
    np.testing.assert_allclose(res.centers, [0.15, 0.95], atol=1e-12)


def test_all_equal_is_one_cluster():
    res = kmeans_1d([3.0] * 6, 3)
    assert res.k == 1 and res.centers[0] == 3.0
    assert set(res.labels.tolist()) == {0}


def test_k1_is_mean(rng):
    x = rng.normal(size=20)
    res = kmeans_1d(x, 1)
    assert res.centers[0] == pytest.approx(x.mean())


def test_too_few_values():
    with pytest.raises(ValueError):
        kmeans_1d([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        RegionConfig(k=2, t=2)


@pytest.mark.parametrize("seed", range(10))
def test_matches_dp_on_separated_clusters(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    locs = np.arange(k) * 10.0
    x = np.concatenate([rng.normal(loc, 0.5, size=rng.integers(3, 12)) for loc in locs])
    rng.shuffle(x)
    assert len(x) <= 64
    res = kmeans_1d(x, k)
    best, centers = dp_kmeans(x, k)
    np.testing.assert_allclose(res.centers, centers, atol=1e-5)
    assert lloyd_cost(x, res) == pytest.approx(best, abs=1e-5)


@given(st.lists(st.floats(-100, 100), min_size=5, max_size=40), st.integers(1, 5))
def test_lloyd_fixed_point_properties(values, k):
    x = np.array(values)
    res = kmeans_1d(x, k)
    # labels are monotone in value and each center is its cluster's mean
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(res.labels[order]) >= 0)
    for c in range(res.k):
        assert res.centers[c] == pytest.approx(x[res.labels == c].mean(), rel=1e-9, abs=1e-9)
    # prefix-sum means can tie two centers when one cluster sums to ~1e-308
    assert np.all(np.diff(res.centers) >= 0)
    # never worse than the DP optimum by construction of the oracle
    assert lloyd_cost(x, res) >= dp_kmeans(x, res.k)[0] - 1e-6


def test_batch_rows_are_independent(rng):
    x = rng.normal(size=(6, 30))
    labels, centers, _ = kmeans_1d_batch(x, 4)
    for i in range(6):
        res = kmeans_1d(x[i], 4)
        assert np.array_equal(labels[i], res.labels)
        np.testing.assert_array_equal(centers[i, : res.k], res.centers)


def test_top_cluster_examples():
    x = np.array([0.0] * 14 + [1.0] * 2)
    mask = top_cluster_mask(x, RegionConfig(k=2, t=1))
    assert mask.sum() == 2 and mask[-2:].all()
    assert top_cluster_mask(np.ones(16), RegionConfig()) is None
    masks, degenerate = top_cluster_masks(np.ones((2, 16)), RegionConfig())
    assert masks.all() and degenerate.all()


def test_t_is_all_but_lowest():
    x = np.array([0.0] * 8 + [5.0] * 8 + [9.0] * 4 + [9.5] * 4)
    mask = top_cluster_mask(x, RegionConfig(k=3, t=2))
    assert np.array_equal(mask, x > 0)
