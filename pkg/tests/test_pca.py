import numpy as np
import pytest

from placerec.aggregation import RankDeficientError, netvlad_forward, pca_apply, pca_fit
from placerec.aggregation.netvlad import NetVladParams


def subspace_data(rng, n=200, d_in=64, k=8):
    basis, _ = np.linalg.qr(rng.standard_normal((d_in, k)))
    return rng.standard_normal((n, k)) * np.arange(k, 0, -1) @ basis.T + rng.standard_normal(d_in)


def test_exact_subspace_reconstruction():
    X = subspace_data(np.random.default_rng(0))
    m = pca_fit(X, 8)
    assert np.max(np.abs(m.reconstruct(X) - X)) < 1e-6


def test_basis_orthonormal():
    m = pca_fit(np.random.default_rng(1).standard_normal((50, 10)), 4)
    np.testing.assert_allclose(m.basis.T @ m.basis, np.eye(4), atol=1e-6)


def test_diagonal_cloud_direction():
    t = np.linspace(-1, 1, 21)
    m = pca_fit(np.stack([t, t], axis=1), 1)
    np.testing.assert_allclose(np.abs(m.basis[:, 0]), [1 / np.sqrt(2)] * 2, atol=1e-12)


def test_matches_covariance_eigendecomposition():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((100, 6)) @ rng.standard_normal((6, 6))
    m = pca_fit(X, 3)
    w, v = np.linalg.eigh(np.cov(X, rowvar=False))
    order = np.argsort(w)[::-1][:3]
    np.testing.assert_allclose(m.explained_variance, w[order], rtol=1e-10)
    # same directions up to sign
    np.testing.assert_allclose(np.abs(np.sum(m.basis * v[:, order], axis=0)), 1.0, atol=1e-8)


def test_rank_deficiency_names_rank():
    X = subspace_data(np.random.default_rng(3), k=3)
    with pytest.raises(RankDeficientError) as exc:
        pca_fit(X, 5)
    assert exc.value.rank == 3 and "3" in str(exc.value)


def test_needs_more_samples_than_dims():
    with pytest.raises(ValueError):
        pca_fit(np.random.default_rng(0).standard_normal((4, 10)), 4)


def test_apply_unit_norm_and_dim():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((40, 12))
    m = pca_fit(X, 5)
    y = pca_apply(m, X)
    assert y.shape == (40, 5)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
    assert pca_apply(m, X[0]).shape == (5,)


def test_nv_pca_pipeline():
    rng = np.random.default_rng(5)
    vlad = NetVladParams.init(16, 8, rng=rng)
    D = netvlad_forward(np.abs(rng.standard_normal((60, 16, 3, 3))), vlad)
    m = pca_fit(D, 32)
    y = pca_apply(m, D)
    assert y.shape == (60, 32)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-9)
