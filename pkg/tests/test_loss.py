import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from placerec.loss import MsLossConfig, SimilarityMatrix, mine_pairs, ms_loss, ms_loss_descriptors
from placerec.selfcheck import check


def loop_ms_loss(S, labels, cfg):
    """Per-anchor mining and loss with plain Python loops."""
    B = len(labels)
    total = 0.0
    for i in range(B):
        pos = [S[i][j] for j in range(B) if j != i and labels[j] == labels[i]]
        neg = [S[i][j] for j in range(B) if labels[j] != labels[i]]
        P = [s for s in pos if not neg or s < max(neg) + cfg.eps_margin]
        N = [s for s in neg if not pos or s > min(pos) - cfg.eps_margin]
        total += math.log1p(sum(math.exp(-cfg.alpha * (s - cfg.lam)) for s in P)) / cfg.alpha
        total += math.log1p(sum(math.exp(cfg.beta * (s - cfg.lam)) for s in N)) / cfg.beta
    return total / B


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_defaults():
    cfg = MsLossConfig()
    assert (cfg.alpha, cfg.beta, cfg.lam, cfg.eps_margin) == (1.0, 50.0, 0.5, 0.1)


def test_separated_batch_mines_nothing():
    labels = [0, 0, 1, 1]
    S = np.array([[1, 1, -1, -1], [1, 1, -1, -1], [-1, -1, 1, 1], [-1, -1, 1, 1]], dtype=float)
    pos, neg = mine_pairs(SimilarityMatrix(S, labels))
    assert not pos.any() and not neg.any()
    assert ms_loss(SimilarityMatrix(S, labels)) == 0.0


def test_hand_mining_example():
    labels = [0, 0, 0, 1]
    S = np.eye(4)
    S[0, 1:] = S[1:, 0] = [0.9, 0.2, 0.5]
    pos, neg = mine_pairs(SimilarityMatrix(S, labels))
    assert np.flatnonzero(neg[0]).tolist() == [3]
    assert np.flatnonzero(pos[0]).tolist() == [2]


def test_single_class_has_no_negatives():
    rng = np.random.default_rng(0)
    d = unit_rows(rng, 5, 3)
    _, neg = mine_pairs(SimilarityMatrix(d @ d.T, [7] * 5))
    assert not neg.any()


def test_two_sample_closed_form():
    S = np.array([[1.0, 0.8], [0.8, 1.0]])
    expected = math.log(1 + math.exp(-0.3))
    assert expected == pytest.approx(0.55436, abs=1e-5)
    assert ms_loss(SimilarityMatrix(S, [0, 0])) == pytest.approx(expected, abs=1e-12)


def test_raising_a_mined_negative_increases_loss():
    labels = [0, 0, 1, 1]
    S = np.array([[1, 0.6, 0.55, 0.0], [0.6, 1, 0.0, 0.0], [0.55, 0.0, 1, 0.7], [0.0, 0.0, 0.7, 1]])
    base = ms_loss(SimilarityMatrix(S, labels))
    S2 = S.copy()
    S2[0, 2] = S2[2, 0] = 0.58
    assert ms_loss(SimilarityMatrix(S2, labels)) > base


def test_nonfinite_similarity_rejected():
    S = np.array([[1.0, np.nan], [np.nan, 1.0]])
    with pytest.raises(ValueError):
        ms_loss(SimilarityMatrix(S, [0, 0]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 4))
def test_matches_loop_oracle(seed, b, n_cls):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_cls, b).tolist()
    d = unit_rows(rng, b, 4)
    S = d @ d.T
    cfg = MsLossConfig()
    assert ms_loss(SimilarityMatrix(S, labels), cfg) == pytest.approx(loop_ms_loss(S.tolist(), labels, cfg), rel=1e-10, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance_and_nonnegativity(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 9)
    d = unit_rows(rng, 9, 4)
    perm = rng.permutation(9)
    a = ms_loss(SimilarityMatrix(d @ d.T, labels))
    b = ms_loss(SimilarityMatrix(d[perm] @ d[perm].T, labels[perm]))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)
    pos, neg = mine_pairs(SimilarityMatrix(d @ d.T, labels))
    assert a >= 0 and (a == 0) == (not pos.any() and not neg.any())


@pytest.mark.parametrize("seed", range(10))
def test_gradient_check(seed):
    assert check("ms-loss", seed).passed


def test_descriptor_gradient_matches_similarity_chain_rule():
    rng = np.random.default_rng(1)
    d = unit_rows(rng, 6, 3)
    labels = [0, 0, 1, 1, 2, 2]
    loss, dD = ms_loss_descriptors(d, labels)
    _, G = ms_loss(SimilarityMatrix(d @ d.T, labels), return_grad=True)
    np.testing.assert_allclose(dD, (G + G.T) @ d)
    assert loss == ms_loss(SimilarityMatrix(d @ d.T, labels))
