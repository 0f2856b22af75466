import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modroute.numerics import (
    InvalidConfig,
    InvalidInput,
    ModelConfig,
    OracleFailure,
    TokenBatch,
    fd_gradient,
    logsumexp,
    sample_gaussian,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_closed_forms():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=0, rtol=0)
    np.testing.assert_allclose(softmax([math.log(3), 0.0]), [0.75, 0.25], atol=1e-15)


def test_softmax_matches_extended_precision():
    rng = np.random.default_rng(7)
    v = rng.normal(size=8) * 3
    tau = 0.7
    mpmath.mp.dps = 50
    ex = [mpmath.exp(mpmath.mpf(float(x)) / mpmath.mpf(tau)) for x in v]
    total = mpmath.fsum(ex)
    expected = np.array([float(e / total) for e in ex])
    np.testing.assert_allclose(softmax(v, tau), expected, atol=1e-12, rtol=0)


def test_softmax_rejects_bad_input():
    with pytest.raises(InvalidInput):
        softmax([1.0, np.nan])
    with pytest.raises(InvalidInput):
        softmax([1.0, 2.0], temperature=0.0)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(v, c):
    p = softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(softmax(v + c), p, atol=1e-12)


def test_logsumexp_examples():
    assert logsumexp([3.25]) == 3.25
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    with pytest.raises(InvalidInput):
        logsumexp([])


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_logsumexp_shift(v, c):
    assert abs(logsumexp(v + c) - (logsumexp(v) + c)) < 1e-12


def test_fd_gradient_examples():
    np.testing.assert_allclose(fd_gradient(lambda x: float(x @ x), [1.0, 2.0]), [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(fd_gradient(lambda x: 3.0, np.ones(4)), np.zeros(4))


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_fd_gradient_exact_on_quadratics(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    b = rng.normal(size=n)
    x = rng.normal(size=n)
    f = lambda z: float(0.5 * z @ A @ z + b @ z)
    exact = 0.5 * (A + A.T) @ x + b
    np.testing.assert_allclose(fd_gradient(f, x, h=1e-4), exact, atol=1e-7)


def test_fd_gradient_reports_bad_coordinate():
    def f(x):
        return math.inf if x[1] > 1.0 else float(x.sum())

    with pytest.raises(OracleFailure) as exc:
        fd_gradient(f, [0.0, 1.0], h=1e-3)
    assert exc.value.coord == 1


def test_sample_gaussian():
    rng = np.random.default_rng(0)
    assert sample_gaussian(rng, [0.0], [1.0], 0).shape == (0, 1)
    x = sample_gaussian(np.random.default_rng(1), [0.0], [1.0], 100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05
    a = sample_gaussian(np.random.default_rng(5), [1.0, 2.0], [0.5, 2.0], 50)
    b = sample_gaussian(np.random.default_rng(5), [1.0, 2.0], [0.5, 2.0], 50)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(InvalidInput):
        sample_gaussian(rng, [0.0], [0.0], 3)


def test_model_config_checks():
    assert ModelConfig(8, 2, 16, 2, 4).N_B == 4
    with pytest.raises(InvalidConfig):
        ModelConfig(8, 2, 16, 2, 3)
    with pytest.raises(InvalidConfig):
        ModelConfig(8, 2, 16, 17, 4)


def test_token_batch_shapes():
    feats = np.zeros((2, 3, 4, 5))
    labels = np.zeros((3, 4), dtype=int)
    b = TokenBatch(feats, labels)
    assert (b.num_layers, b.num_samples, b.seq_len, b.dim) == (2, 3, 4, 5)
    assert b.layer_tokens(1).shape == (12, 5)
    with pytest.raises(InvalidInput):
        TokenBatch(feats, np.zeros((3, 5), dtype=int))
    with pytest.raises(InvalidInput):
        TokenBatch(feats, np.full((3, 4), 2))
