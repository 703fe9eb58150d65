"""Multi-similarity loss with its hard-pair miner.

Mining treats the mined sets as constants, so gradients flow only through
the similarities of mined pairs.  When an anchor has no negatives its
positives are not filtered (and vice versa); an anchor contributes zero
only when both of its mined sets are empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MsLossConfig:
    alpha: float = 1.0
    beta: float = 50.0
    lam: float = 0.5
    eps_margin: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.eps_margin < 0:
            raise ValueError("eps_margin must be nonnegative")


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [B, B]
    labels: np.ndarray  # [B]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        b = self.labels.shape[0]
        if self.values.shape != (b, b):
            raise ValueError(f"similarity matrix shape {self.values.shape} does not match {b} labels")

    @classmethod
    def from_descriptors(cls, descriptors, labels) -> "SimilarityMatrix":
        d = np.asarray(descriptors, dtype=np.float64)
        return cls(d @ d.T, labels)


def mine_pairs(sim: SimilarityMatrix, cfg: MsLossConfig = MsLossConfig()):
    """Boolean masks ``(pos, neg)`` [B, B]; row i holds the mined sets of anchor i."""
    s = sim.values
    lab = sim.labels
    b = lab.shape[0]
    same = lab[:, None] == lab[None, :]
    eye = np.eye(b, dtype=bool)
    pos_all = same & ~eye
    neg_all = ~same

    min_pos = np.where(pos_all, s, np.inf).min(axis=1, keepdims=True)
    max_neg = np.where(neg_all, s, -np.inf).max(axis=1, keepdims=True)
    neg = neg_all & ((s > min_pos - cfg.eps_margin) | np.isinf(min_pos))
    pos = pos_all & ((s < max_neg + cfg.eps_margin) | np.isinf(max_neg))
    return pos, neg


def _log1p_sum_exp(z: np.ndarray, mask: np.ndarray):
    """Row-wise log(1 + sum_{mask} exp(z)) and its softmax weights."""
    zm = np.where(mask, z, -np.inf)
    top = np.maximum(zm.max(axis=1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(zm - top), 0.0)
    denom = np.exp(-top) + e.sum(axis=1, keepdims=True)
    return (top + np.log(denom))[:, 0], e / denom


def ms_loss(sim: SimilarityMatrix, cfg: MsLossConfig = MsLossConfig(), masks=None, return_grad: bool = False):
    """Mean over anchors of the positive and negative log-sum-exp terms.

    Returns the scalar loss, or ``(loss, dL/dS)`` with ``return_grad``.
    """
    s = sim.values
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite similarity")
    pos, neg = mine_pairs(sim, cfg) if masks is None else masks
    b = s.shape[0]
    lp, wp = _log1p_sum_exp(-cfg.alpha * (s - cfg.lam), pos)
    ln, wn = _log1p_sum_exp(cfg.beta * (s - cfg.lam), neg)
    loss = float((lp / cfg.alpha + ln / cfg.beta).sum() / b)
    if not return_grad:
        return loss
    grad = (wn - wp) / b
    return loss, grad


def ms_loss_descriptors(descriptors, labels, cfg: MsLossConfig = MsLossConfig()):
    """Loss and gradient w.r.t. the descriptor rows (similarity = dot product)."""
    d = np.asarray(descriptors, dtype=np.float64)
    sim = SimilarityMatrix(d @ d.T, labels)
    loss, g = ms_loss(sim, cfg, return_grad=True)
    return loss, (g + g.T) @ d
