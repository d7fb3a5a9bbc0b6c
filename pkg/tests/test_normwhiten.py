import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sansaw.evaluation import gradcheck
from sansaw.normwhiten import (
    DegenerateRegionError,
    NormConfig,
    contiguous_groups,
    covariance,
    giw_loss,
    instance_normalize,
    iw_loss,
    mean_abs_offdiag,
    regional_normalize,
    standardize,
    standardize_backward,
)

from oracles import brute_cov


A = [1.0, -1, 1, -1]
B = [1.0, 1, -1, -1]


def fmap(*channels):
    return np.array(channels, dtype=np.float64).reshape(1, len(channels), 2, 2)


def test_instance_normalize_example():
    out = instance_normalize(fmap([1, 2, 3, 4]))
    np.testing.assert_allclose(out.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)


def test_constant_channel_normalizes_to_zero():
    assert np.all(instance_normalize(fmap([5, 5, 5, 5])) == 0)


def test_idempotent_on_standardized():
    x = instance_normalize(fmap([1, 2, 3, 4]))
    np.testing.assert_allclose(instance_normalize(x), x, atol=1e-4)


def test_regional_example():
    f = np.array([1.0, 3, 7, 7]).reshape(1, 1, 2, 2)
    region = np.array([True, True, False, False]).reshape(1, 2, 2)
    out = regional_normalize(f, region, NormConfig(eps=1e-12))
    np.testing.assert_allclose(out.ravel(), [-1, 1, 7, 7], atol=1e-9)


def test_full_region_is_instance_norm(rng):
    f = rng.normal(size=(2, 3, 4, 4))
    full = np.ones((2, 4, 4), bool)
    np.testing.assert_allclose(regional_normalize(f, full), instance_normalize(f), atol=1e-12)


def test_single_pixel_region_maps_to_zero(rng):
    f = rng.normal(size=(1, 2, 3, 3))
    region = np.zeros((1, 3, 3), bool)
    region[0, 1, 2] = True
    out = regional_normalize(f, region)
    assert np.all(out[0, :, 1, 2] == 0)
    assert np.array_equal(out[0, :, 0], f[0, :, 0])


def test_empty_region_raises():
    with pytest.raises(DegenerateRegionError):
        regional_normalize(np.ones((1, 1, 2, 2)), np.zeros((1, 2, 2), bool))


def test_eps_must_be_positive():
    with pytest.raises(ValueError):
        NormConfig(eps=0)


def test_covariance_examples():
    np.testing.assert_allclose(covariance(fmap([1, 2, 3, 4], [2, 4, 6, 8])[0]), [[1.25, 2.5], [2.5, 5.0]])
    np.testing.assert_allclose(covariance(fmap(A, B)[0]), np.eye(2))
    c = covariance(fmap([3, 3, 3, 3], [1, 2, 3, 4])[0])
    assert np.all(c[0] == 0) and np.all(c[:, 0] == 0)


def test_covariance_matches_brute_force(rng):
    f = rng.normal(size=(5, 3, 4))
    np.testing.assert_allclose(covariance(f), brute_cov(f), atol=1e-12)
    with pytest.raises(ValueError):
        covariance(f[None])


def test_iw_examples():
    assert iw_loss(fmap(A, B))[0] == 0
    assert iw_loss(fmap([1, 2, 3, 4], [2, 4, 6, 8]))[0] == pytest.approx(9.25)
    assert iw_loss(np.zeros((1, 3, 2, 2)))[0] == 3


def test_iw_sums_over_samples():
    f = np.concatenate([fmap([1, 2, 3, 4], [2, 4, 6, 8])] * 3)
    assert iw_loss(f)[0] == pytest.approx(3 * 9.25)


def test_giw_examples(rng):
    f = fmap(A, B, A, B)
    assert giw_loss(f, 2)[0] == 0
    assert iw_loss(f)[0] > 0
    x = rng.normal(size=(3, 4, 3, 3))
    assert giw_loss(x, 1)[0] == pytest.approx(iw_loss(x)[0] / 3)
    var = x.reshape(3, 4, -1).var(axis=-1)
    assert giw_loss(x, 4)[0] == pytest.approx(np.abs(var - 1).sum() / 3)


def test_giw_rejects_uneven_groups():
    with pytest.raises(ValueError):
        contiguous_groups(np.zeros((1, 4, 2, 2)), 3)


@pytest.mark.parametrize("loss", [iw_loss, lambda f: giw_loss(f, 2)])
def test_whitening_gradients(rng, loss):
    f = rng.normal(size=(2, 4, 3, 3))
    _, g = loss(f)
    assert gradcheck(lambda x: loss(x)[0], f, g) < 1e-3


@pytest.mark.parametrize("with_region", [False, True])
def test_standardize_gradient(rng, with_region):
    f = rng.normal(size=(2, 3, 4, 4))
    region = (rng.uniform(size=(2, 1, 4, 4)) > 0.4) if with_region else None
    w = rng.normal(size=f.shape)
    out, cache = standardize(f, region)
    g = standardize_backward(w, cache)
    assert gradcheck(lambda x: float((standardize(x, region)[0] * w).sum()), f, g) < 1e-3


def test_offdiag_single_channel_is_zero(rng):
    assert mean_abs_offdiag(rng.normal(size=(2, 1, 3, 3))) == 0.0


@given(arrays(np.float64, (2, 3, 3, 4), elements=st.floats(-10, 10)))
def test_covariance_symmetric(f):
    c = covariance(f[0])
    assert np.array_equal(c, c.T)


@given(arrays(np.float64, (1, 2, 4, 4), elements=st.floats(-5, 5)), st.floats(0.1, 100))
def test_instance_norm_scale_invariant(f, alpha):
    sigma = f.reshape(2, -1).std(axis=1)
    if sigma.min() < 1e-2:
        return
    cfg = NormConfig(eps=1e-9)
    np.testing.assert_allclose(instance_normalize(alpha * f, cfg), instance_normalize(f, cfg), atol=1e-4)


@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-5, 5)))
def test_instance_norm_moments(f):
    out = instance_normalize(f)
    sigma = f.std(axis=(2, 3))
    assert np.abs(out.mean(axis=(2, 3))).max() < 1e-6
    expected = sigma / (sigma + 1e-5)
    np.testing.assert_allclose(out.std(axis=(2, 3)), expected, atol=1e-4)
