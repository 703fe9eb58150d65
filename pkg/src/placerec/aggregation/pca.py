from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import l2_normalize

# singular values below this fraction of the largest count as zero
RANK_RTOL = 1e-10


class RankDeficientError(ValueError):
    def __init__(self, rank: int, requested: int):
        super().__init__(f"descriptors span rank {rank}, fewer than the requested {requested} dimensions")
        self.rank = rank
        self.requested = requested


@dataclass
class PcaModel:
    mean: np.ndarray  # [D_in]
    basis: np.ndarray  # [D_in, D_out], orthonormal columns
    explained_variance: np.ndarray  # [D_out]

    @property
    def in_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]

    def project(self, d: np.ndarray) -> np.ndarray:
        return (np.asarray(d, dtype=np.float64) - self.mean) @ self.basis

    def reconstruct(self, d: np.ndarray) -> np.ndarray:
        return self.project(d) @ self.basis.T + self.mean


def pca_fit(descriptors, out_dim: int) -> PcaModel:
    """Top-``out_dim`` principal directions of mean-centered descriptors.

    Uses the thin SVD of the centered data matrix, whose right singular
    vectors are the covariance eigenvectors.  No whitening.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("descriptors must be an [n, D] array")
    n, d_in = X.shape
    if out_dim < 1 or out_dim > d_in:
        raise ValueError(f"output dimension {out_dim} not in [1, {d_in}]")
    if n <= out_dim:
        raise ValueError(f"need more than {out_dim} descriptors, got {n}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank = int(np.sum(s > RANK_RTOL * max(s[0], np.finfo(float).tiny)))
    if rank < out_dim:
        raise RankDeficientError(rank, out_dim)
    basis = vt[:out_dim].T.copy()
    # fix each column's sign so its largest-magnitude entry is positive
    pivot = np.argmax(np.abs(basis), axis=0)
    basis *= np.sign(basis[pivot, np.arange(out_dim)])
    return PcaModel(mean, basis, s[:out_dim] ** 2 / (n - 1))


def pca_apply(model: PcaModel, d) -> np.ndarray:
    """Project one descriptor (or a batch of rows) and L2-normalize."""
    y, _ = l2_normalize(np.atleast_2d(model.project(d)))
    return y[0] if np.ndim(d) == 1 else y
