import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit
from scipy.stats import norm

from placerec.numerics import (
    GELU_MIN_OFFSET,
    elementwise,
    gelu,
    gelu_grad,
    grad_check,
    l2_normalize,
    l2_normalize_backward,
    sigmoid,
)


def test_sigmoid_of_zero():
    assert np.array_equal(elementwise("sigmoid", [0.0, 0.0, 0.0]), [0.5, 0.5, 0.5])


def test_gelu_zero_is_fixpoint():
    assert elementwise("gelu", [0.0])[0] == 0.0


def test_power_integer_exponent():
    assert np.array_equal(elementwise("power", [1.0, 2.0], 3), [1.0, 8.0])


def test_power_negative_base_fractional_exponent_rejected():
    with pytest.raises(ValueError):
        elementwise("power", [-1.0, 2.0], 0.5)
    # integral exponents are fine on negative bases
    assert np.array_equal(elementwise("power", [-2.0], 2), [4.0])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_nonfinite_input_rejected(bad):
    with pytest.raises(ValueError):
        elementwise("relu", [1.0, bad])


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        elementwise("tanh", [1.0])


def test_sigmoid_matches_scipy_and_does_not_overflow():
    x = np.linspace(-800, 800, 2001)
    np.testing.assert_allclose(sigmoid(x), expit(x), rtol=1e-12, atol=1e-300)
    s = sigmoid(x)
    assert np.all((s >= 0) & (s <= 1))


def test_gelu_matches_gaussian_cdf_oracle():
    x = np.linspace(-6, 6, 241)
    np.testing.assert_allclose(gelu(x), x * norm.cdf(x), rtol=1e-12, atol=1e-15)


def test_gelu_grad_matches_finite_difference():
    x = np.linspace(-4, 4, 81)
    h = 1e-6
    np.testing.assert_allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)


def test_gelu_min_offset_covers_gelu_minimum():
    x = np.linspace(-3, 0, 300001)
    assert gelu(x).min() > -GELU_MIN_OFFSET
    assert gelu(x).min() < -0.16


def test_elementwise_is_pure():
    x = np.random.default_rng(0).standard_normal(100)
    assert elementwise("gelu", x).tobytes() == elementwise("gelu", x.copy()).tobytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8).filter(lambda v: max(map(abs, v)) > 1e-3))
def test_l2_normalize_unit_norm(values):
    y, n = l2_normalize(np.array(values))
    assert math.isclose(np.linalg.norm(y), 1.0, rel_tol=1e-12)
    np.testing.assert_allclose(y * n, values, rtol=1e-12, atol=1e-12)


def test_l2_normalize_backward_against_grad_check():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((3, 5))
    r = rng.standard_normal((3, 5))

    def f(p):
        y, n = l2_normalize(p["x"])
        return float(np.sum(r * y)), {"x": l2_normalize_backward(r, y, n)}

    assert grad_check(f, {"x": x0}).passed


def test_grad_check_quadratic_exact():
    def f(p):
        x = p["x"]
        return float(np.sum(x**2)), {"x": 2 * x}

    rep = grad_check(f, {"x": np.array([1.0, 2.0, 3.0])})
    assert rep.passed and rep.max_rel_error < 1e-8


def test_grad_check_catches_wrong_gradient():
    def f(p):
        x = p["x"]
        return float(np.sum(x**2)), {"x": 2 * x * 1.1}

    rep = grad_check(f, {"x": np.array([1.0, 2.0, 3.0])})
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.1 / 1.1, rel=1e-6)


def test_grad_check_gem_on_random_map_passes_tight_tolerance():
    from placerec.aggregation.gem import gem_backward, gem_forward

    rng = np.random.default_rng(0)
    x = np.abs(rng.standard_normal((1, 4, 9))) + 0.1
    log_p = np.log(np.full(4, 3.0))

    def f(p):
        out, cache = gem_forward(p["x"], p["log_p"])
        dx, dlp = gem_backward(np.ones_like(out), cache)
        return float(out.sum()), {"x": dx, "log_p": dlp}

    assert grad_check(f, {"x": x, "log_p": log_p}, tol=1e-5).passed


def test_grad_check_nonfinite_gradient_reports_reason():
    def f(p):
        return 0.0, {"x": np.array([np.nan])}

    rep = grad_check(f, {"x": np.array([1.0])})
    assert not rep.passed and "non-finite" in rep.reason


@pytest.mark.parametrize("eps", [1e-8, 1e-2])
def test_grad_check_eps_range(eps):
    with pytest.raises(ValueError):
        grad_check(lambda p: (0.0, {"x": np.zeros(1)}), {"x": np.zeros(1)}, eps=eps)
