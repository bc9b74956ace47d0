import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from enetlts.preprocess import (
    MAD_CONSISTENCY,
    ScalingInfo,
    backtransform,
    forward_transform,
    robust_standardize,
    subset_standardize,
)
from enetlts.solver import predict_proba


def test_robust_column_example():
    Xs, info = robust_standardize(np.arange(1.0, 6.0)[:, None])
    np.testing.assert_allclose(Xs[:, 0], np.array([-2, -1, 0, 1, 2]) / MAD_CONSISTENCY)
    assert info.centers[0] == 3 and info.kind == "robust"


def test_constant_column_flagged():
    X = np.array([[7.0, 1.0], [7.0, 2.0], [7.0, 4.0]])
    Xs, info = robust_standardize(X)
    assert info.centers[0] == 7 and info.scales[0] == 1 and info.constant.tolist() == [True, False]
    np.testing.assert_array_equal(Xs[:, 0], 0.0)


def test_zero_mad_falls_back_to_sd():
    x = np.array([0.0, 0.0, 0.0, 0.0, 5.0])
    _, info = robust_standardize(x[:, None])
    assert info.scales[0] == pytest.approx(x.std(ddof=1))
    assert not info.constant[0]


def test_subset_standardize_excludes_outlier():
    x = np.array([1.0, 2.0, 3.0, 4.0, 1000.0])[:, None]
    Xs, info = subset_standardize(x, [0, 1, 2, 3])
    assert Xs[:4, 0].mean() == pytest.approx(0.0, abs=1e-12)
    assert Xs[:4, 0].std(ddof=1) == pytest.approx(1.0)
    assert Xs[4, 0] == pytest.approx((1000 - 2.5) / np.std([1, 2, 3, 4], ddof=1))
    with pytest.raises(ValueError):
        subset_standardize(x, [0])


def test_backtransform_examples():
    info = ScalingInfo(np.array([3.0]), np.array([2.0]), "classical", np.array([False]))
    B = backtransform(np.array([[0.0], [1.0]]), info)
    np.testing.assert_allclose(B, [[-1.5], [0.5]])
    ident = ScalingInfo(np.zeros(2), np.ones(2), "classical", np.zeros(2, bool))
    Bs = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(backtransform(Bs, ident), Bs)
    with pytest.raises(ValueError):
        backtransform(np.zeros((4, 3)), info)


def test_backtransform_probabilities_random(rng):
    X = rng.normal(2.0, 3.0, size=(10, 4))
    Xs, info = robust_standardize(X)
    Bs = rng.normal(size=(5, 3))
    np.testing.assert_allclose(predict_proba(backtransform(Bs, info), X), predict_proba(Bs, Xs), atol=1e-10)
    np.testing.assert_allclose(forward_transform(backtransform(Bs, info), info), Bs, atol=1e-12)


finite = st.floats(-100, 100, allow_nan=False)
# multiples of 1/8 add without rounding, so shifts are exact
dyadic = st.integers(-800, 800).map(lambda v: v / 8)


@settings(max_examples=100, deadline=None)
@given(X=arrays(np.float64, (12, 3), elements=finite), seed=st.integers(0, 1000))
def test_backtransform_commutes_with_prediction(X, seed):
    Xs, info = robust_standardize(X)
    Bs = np.random.default_rng(seed).normal(size=(4, 3)) * 0.1
    Bs[1:][info.constant] = 0.0
    Z_raw = backtransform(Bs, info)[0] + X @ backtransform(Bs, info)[1:]
    Z_std = Bs[0] + Xs @ Bs[1:]
    np.testing.assert_allclose(Z_raw, Z_std, atol=1e-8 * max(1.0, np.abs(Z_std).max()))


@settings(max_examples=100, deadline=None)
@given(X=arrays(np.float64, (9, 2), elements=dyadic), shift=dyadic)
def test_robust_shift_equivariance(X, shift):
    Y = X.copy()
    Y[:, 0] += shift
    _, a = robust_standardize(X)
    _, b = robust_standardize(Y)
    assert b.centers[0] == pytest.approx(a.centers[0] + shift, abs=1e-9)
    assert b.centers[1] == a.centers[1]
    np.testing.assert_allclose(b.scales, a.scales, rtol=1e-9, atol=1e-9)
