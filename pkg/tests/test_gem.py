import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from placerec.aggregation import (
    FeatureMap,
    G2mHead,
    G2mParams,
    GcaParams,
    GemHead,
    GemParams,
    g2m_forward,
    g2m_weight_count,
    gca_gate,
    gem_pool,
)


def fm_of(rows):
    """A C x 1 x N map from per-channel value lists."""
    return FeatureMap(np.array(rows, dtype=np.float64)[:, None, :])


def test_constant_map_is_fixpoint():
    fm = FeatureMap(np.full((5, 3, 3), 3.7))
    for p in (0.5, 1.0, 3.0, 17.0):
        assert np.all(gem_pool(fm, p) == 3.7)


def test_p1_is_mean():
    assert gem_pool(fm_of([[1, 2, 3, 4]]), 1.0)[0] == pytest.approx(2.5, abs=1e-12)


def test_p3_closed_form():
    # independent evaluation of the generalized mean
    expected = ((1**3 + 2**3) / 2) ** (1 / 3)
    assert expected == pytest.approx(1.65096, abs=1e-5)
    assert gem_pool(fm_of([[1, 2]]), 3.0)[0] == pytest.approx(expected, rel=1e-14)


def test_large_p_approaches_max():
    assert gem_pool(fm_of([[1, 2, 3, 9]]), 1000.0)[0] == pytest.approx(9.0, rel=0.01)


def test_per_channel_exponents():
    out = gem_pool(fm_of([[1, 2], [1, 2]]), np.array([1.0, 3.0]))
    np.testing.assert_allclose(out, [1.5, 4.5 ** (1 / 3)], rtol=1e-14)


@pytest.mark.parametrize("p", [0.0, -1.0, np.inf])
def test_invalid_exponent(p):
    with pytest.raises(ValueError):
        gem_pool(fm_of([[1, 2]]), p)


def test_negative_input_rejected():
    with pytest.raises(ValueError):
        gem_pool(fm_of([[1, -2]]), 3.0)


def test_zero_input_clamped_not_nan():
    out = gem_pool(fm_of([[0, 0, 0]]), 2.5)
    assert np.isfinite(out).all() and out[0] == pytest.approx(1e-6)


def test_no_overflow_for_large_values_and_exponents():
    out = gem_pool(fm_of([[1e30, 2e30]]), 50.0)
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(2e30 * (0.5 * (0.5**50 + 1)) ** (1 / 50), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(0.01, 10)),
    st.integers(0, 14),
    st.floats(0.0, 5.0),
    st.floats(0.5, 8.0),
)
def test_monotone_in_inputs(x, idx, bump, p):
    before = gem_pool(fm_of(x), p)
    y = x.copy()
    y.flat[idx] += bump
    after = gem_pool(fm_of(y), p)
    assert np.all(after >= before - 1e-12 * np.abs(before))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(0.01, 10)))
def test_p1_mean_property(x):
    np.testing.assert_allclose(gem_pool(fm_of(x), 1.0), x.mean(axis=1), rtol=1e-12, atol=1e-12)


def test_gem_params_positive():
    with pytest.raises(ValueError):
        GemParams.from_p([1.0, 0.0])
    assert np.allclose(GemParams.init(4).p, 3.0)


# -- GCA ------------------------------------------------------------------------------

def test_zero_gate_is_half():
    g = GcaParams.init(8, 2, zero=True)
    fm = FeatureMap(np.random.default_rng(0).uniform(0, 2, (8, 3, 3)))
    assert np.all(gca_gate(fm, g) == 0.5)


def test_default_rank_64_accepted():
    assert GcaParams.init(768, 64, rng=0).rank == 64


def test_rank_must_be_below_channels():
    with pytest.raises(ValueError):
        GcaParams.init(8, 8)


def test_gate_matches_direct_formula():
    rng = np.random.default_rng(1)
    g = GcaParams.init(6, 2, rng=rng)
    g.b_down[:] = rng.standard_normal(2)
    g.b_up[:] = rng.standard_normal(6)
    fm = FeatureMap(rng.uniform(0.1, 2, (6, 2, 3)))
    pooled = (fm.values.reshape(6, -1) ** 3).mean(axis=1) ** (1 / 3)
    pre = pooled @ g.w_down + g.b_down
    hidden = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in pre])
    expected = 1 / (1 + np.exp(-(hidden @ g.w_up + g.b_up)))
    np.testing.assert_allclose(gca_gate(fm, g), expected, rtol=1e-12)
    assert np.all((expected > 0) & (expected < 1))


def test_w_up_perturbation_is_local():
    rng = np.random.default_rng(2)
    g = GcaParams.init(6, 2, rng=rng)
    fm = FeatureMap(rng.uniform(0.1, 2, (6, 2, 2)))
    before = gca_gate(fm, g)
    g.w_up[:, 3] += 0.3
    after = gca_gate(fm, g)
    changed = np.flatnonzero(before != after)
    assert changed.tolist() == [3]


# -- G2M ------------------------------------------------------------------------------

def test_default_output_dim_768():
    head = G2mHead.create(768, 64, rng=0)
    fm = FeatureMap(np.random.default_rng(0).uniform(0, 1, (768, 2, 2)))
    d = head(fm)
    assert d.shape == (768,)
    assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-6)


def test_weight_count_full_width():
    assert g2m_weight_count(768, 64, 768) == 768 * 64 + 64 * 768 + 768 * 768 == 688_128
    assert abs(688_128 / 1e6 - 0.69) / 0.69 < 0.01
    assert G2mHead.create(768, 64, rng=0).weight_count() == 688_128


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(1, 32), st.integers(1, 64))
def test_weight_count_formula(c, r, d):
    r = min(r, c - 1)
    head = G2mHead.create(c, r, d, rng=0)
    assert head.weight_count() == c * r + r * c + c * d == g2m_weight_count(c, r, d)


def test_zero_gate_equals_ungated_gem_head():
    rng = np.random.default_rng(4)
    c = 10
    params = G2mParams.init(c, 3, 7, rng=rng)
    params.gca.w_down[:] = 0
    params.gca.w_up[:] = 0
    params.b_fc[:] = 0
    fm = FeatureMap(rng.uniform(0, 2, (c, 3, 3)))
    gem = GemHead.create(c, 7, rng=0)
    gem.params["fc.w"] = params.w_fc.copy()
    gem.params["fc.b"] = np.zeros(7)
    gem.params["gem.log_p"] = params.main_p.log_p.copy()
    np.testing.assert_allclose(g2m_forward(fm, params), gem(fm), atol=1e-12)


def test_heads_unit_norm_and_batched_consistency():
    rng = np.random.default_rng(5)
    maps = rng.uniform(0, 2, (3, 12, 2, 2))
    for head in (GemHead.create(12, 5, rng=1), G2mHead.create(12, 4, 6, rng=1)):
        batch = head(maps)
        np.testing.assert_allclose(np.linalg.norm(batch, axis=1), 1.0, atol=1e-6)
        for i in range(3):
            np.testing.assert_allclose(head(FeatureMap(maps[i])), batch[i], atol=1e-12)
