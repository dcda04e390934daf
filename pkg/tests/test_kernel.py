import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpadapter.errors import InvalidArgumentError
from gpadapter.kernel import (
    SE,
    GpParams,
    build_kernel_matrix,
    build_kernel_matrix_grads,
    se_kernel,
    se_kernel_grad,
)

finite = st.floats(-5, 5, allow_nan=False)
times = st.floats(-10, 10, allow_nan=False)


def test_zero_lag_returns_amplitude():
    assert se_kernel(0.0, 0.0, GpParams.from_natural(1.0, 1.0, 1.0)) == 1.0
    assert se_kernel(3.2, 3.2, GpParams.from_natural(2.5, 7.0, 1.0)) == pytest.approx(2.5, rel=1e-15)


def test_flat_kernel_when_inverse_length_vanishes():
    # b = e^-50 is zero to double precision at unit lag
    assert se_kernel(0.0, 1.0, GpParams(0.0, -50.0, 0.0)) == pytest.approx(1.0, abs=1e-15)


def test_closed_form_value():
    p = GpParams.from_natural(2.5, 0.8, 1.0)
    assert se_kernel(0.3, 1.7, p) == pytest.approx(2.5 * math.exp(-0.8 * 1.4**2), rel=1e-14)


def test_grad_at_zero_lag():
    p = GpParams(0.7, -0.3, 0.1)
    d_alpha, d_beta = se_kernel_grad(1.5, 1.5, p)
    assert d_alpha == pytest.approx(p.amplitude, rel=1e-15)
    assert d_beta == 0.0


def test_grad_matches_finite_difference_unit_lag():
    p = GpParams(0.0, 0.0, 0.0)
    h = 1e-6
    fd_alpha = (se_kernel(0, 1, p.replace(alpha=h)) - se_kernel(0, 1, p.replace(alpha=-h))) / (2 * h)
    fd_beta = (se_kernel(0, 1, p.replace(beta=h)) - se_kernel(0, 1, p.replace(beta=-h))) / (2 * h)
    d_alpha, d_beta = se_kernel_grad(0, 1, p)
    assert d_alpha == pytest.approx(fd_alpha, rel=1e-6)
    assert d_beta == pytest.approx(fd_beta, rel=1e-6)


def test_beta_grad_vanishes_for_flat_kernel():
    _, d_beta = se_kernel_grad(0.0, 1.0, GpParams(0.0, -30.0, 0.0))
    assert abs(d_beta) < 1e-12


def test_grad_matches_finite_difference_random(rng):
    h = 1e-6
    for _ in range(100):
        t1, t2 = rng.uniform(-2, 2, 2)
        p = GpParams(*rng.uniform(-1.5, 1.5, 3))
        d_alpha, d_beta = se_kernel_grad(t1, t2, p)
        fd_alpha = (se_kernel(t1, t2, p.replace(alpha=p.alpha + h)) - se_kernel(t1, t2, p.replace(alpha=p.alpha - h))) / (2 * h)
        fd_beta = (se_kernel(t1, t2, p.replace(beta=p.beta + h)) - se_kernel(t1, t2, p.replace(beta=p.beta - h))) / (2 * h)
        assert d_alpha == pytest.approx(fd_alpha, rel=1e-5, abs=1e-10)
        assert d_beta == pytest.approx(fd_beta, rel=1e-5, abs=1e-10)


def test_non_finite_inputs_raise():
    p = GpParams()
    with pytest.raises(InvalidArgumentError):
        se_kernel(float("nan"), 0.0, p)
    with pytest.raises(InvalidArgumentError):
        se_kernel_grad(0.0, float("inf"), p)
    with pytest.raises(InvalidArgumentError):
        GpParams(float("nan"), 0.0, 0.0)


def test_from_natural_rejects_non_positive():
    with pytest.raises(InvalidArgumentError):
        GpParams.from_natural(0.0, 1.0, 1.0)


def test_matrix_examples():
    p = GpParams(0.4, 0.2, 0.0)
    assert build_kernel_matrix([0.0], [0.0], p).tolist() == [[p.amplitude]]
    col = build_kernel_matrix([0.0, 1.0], [0.0], p)
    assert col.shape == (2, 1)
    assert col[0, 0] == se_kernel(0.0, 0.0, p)
    assert col[1, 0] == pytest.approx(se_kernel(1.0, 0.0, p), rel=1e-15)


def test_matrix_empty_raises():
    with pytest.raises(InvalidArgumentError):
        build_kernel_matrix([], [0.0], GpParams())


def test_matrix_symmetric_psd(rng):
    for _ in range(20):
        x = rng.uniform(0, 1, 5)
        K = build_kernel_matrix(x, x, GpParams(*rng.uniform(-1, 3, 3)))
        assert np.array_equal(K, K.T)
        lam = np.linalg.eigvalsh(K)
        assert lam.min() >= -1e-10 * lam.max()


def test_matrix_grads_match_entrywise(rng):
    x, y = rng.uniform(0, 1, 4), rng.uniform(0, 1, 3)
    p = GpParams(0.3, 1.1, -1.0)
    d_alpha, d_beta = build_kernel_matrix_grads(x, y, p)
    for i in range(4):
        for j in range(3):
            ga, gb = se_kernel_grad(x[i], y[j], p)
            assert d_alpha[i, j] == pytest.approx(ga, rel=1e-14)
            assert d_beta[i, j] == pytest.approx(gb, rel=1e-14, abs=1e-300)


@given(finite, finite, finite)
def test_natural_parameters_positive_and_bijective(alpha, beta, gamma):
    p = GpParams(alpha, beta, gamma)
    assert p.amplitude > 0 and p.inv_length > 0 and p.noise > 0
    back = GpParams.from_natural(p.amplitude, p.inv_length, p.noise)
    np.testing.assert_allclose(back.to_array(), p.to_array(), atol=1e-12)


@given(times, times, finite, finite)
def test_symmetry(t1, t2, alpha, beta):
    p = GpParams(alpha, beta, 0.0)
    assert se_kernel(t1, t2, p) == se_kernel(t2, t1, p)


@given(times, times, st.floats(-100, 100), finite, finite)
def test_stationarity(t1, t2, c, alpha, beta):
    p = GpParams(alpha, beta, 0.0)
    # the shift only perturbs the lag by rounding, so compare through the lag
    lag = (t1 + c) - (t2 + c)
    assert se_kernel(t1 + c, t2 + c, p) == pytest.approx(float(SE.from_lag(lag, p)), rel=1e-12)
    assert lag == pytest.approx(t1 - t2, abs=1e-12 * (1 + abs(c) + abs(t1) + abs(t2)))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), finite, finite, st.floats(math.log(1e-8), 2))
def test_regularized_gram_is_positive_definite(xs, alpha, beta, gamma):
    p = GpParams(alpha, beta, gamma)
    K = build_kernel_matrix(xs, xs, p) + p.noise * np.eye(len(xs))
    np.linalg.cholesky(K)
