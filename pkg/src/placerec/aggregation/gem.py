"""Generalized mean pooling, the channel-attention gate, and the two GeM heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import gelu, gelu_grad, l2_normalize, l2_normalize_backward, sigmoid
from .base import Head, as_tokens, is_single

GEM_CLAMP = 1e-6
GEM_INIT_P = 3.0


@dataclass
class GemParams:
    """Per-channel pooling exponents, stored as their logarithm."""

    log_p: np.ndarray

    @classmethod
    def from_p(cls, p) -> "GemParams":
        p = np.atleast_1d(np.asarray(p, dtype=np.float64))
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise ValueError("GeM exponents must be finite and > 0")
        return cls(np.log(p))

    @classmethod
    def init(cls, channels: int, p: float = GEM_INIT_P) -> "GemParams":
        return cls.from_p(np.full(channels, p))

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.log_p)


@dataclass
class GcaParams:
    w_down: np.ndarray  # [C, r]
    b_down: np.ndarray  # [r]
    w_up: np.ndarray  # [r, C]
    b_up: np.ndarray  # [C]
    gate_p: GemParams

    def __post_init__(self):
        c, r = self.w_down.shape
        if self.w_up.shape != (r, c):
            raise ValueError(f"w_up must be ({r}, {c}), got {self.w_up.shape}")
        if r >= c:
            raise ValueError(f"GCA rank {r} must be smaller than the channel count {c}")

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]

    @classmethod
    def init(cls, channels: int, rank: int = 64, rng=None, zero: bool = False) -> "GcaParams":
        rng = np.random.default_rng(rng)
        if zero:
            w_down = np.zeros((channels, rank))
            w_up = np.zeros((rank, channels))
        else:
            w_down = rng.uniform(-1, 1, (channels, rank)) / np.sqrt(channels)
            w_up = rng.uniform(-1, 1, (rank, channels)) / np.sqrt(rank)
        return cls(w_down, np.zeros(rank), w_up, np.zeros(channels), GemParams.init(channels))


@dataclass
class G2mParams:
    main_p: GemParams
    gca: GcaParams
    w_fc: np.ndarray  # [C, D_out]
    b_fc: np.ndarray  # [D_out]

    @classmethod
    def init(cls, channels: int = 768, rank: int = 64, out_dim: int | None = None, rng=None) -> "G2mParams":
        rng = np.random.default_rng(rng)
        out_dim = channels if out_dim is None else out_dim
        gca = GcaParams.init(channels, rank, rng)
        w_fc = rng.uniform(-1, 1, (channels, out_dim)) / np.sqrt(channels)
        return cls(GemParams.init(channels), gca, w_fc, np.zeros(out_dim))


def g2m_weight_count(channels: int, rank: int, out_dim: int) -> int:
    """Weights-only parameter count: both gate matrices plus the FC matrix."""
    return channels * rank + rank * channels + channels * out_dim


# -- batched cores ---------------------------------------------------------

def gem_forward(x: np.ndarray, log_p: np.ndarray):
    """GeM over the last axis of ``x`` [B, C, N]; returns ([B, C], cache).

    Evaluated as ``s * mean((x/s)^p)^(1/p)`` with ``s`` the per-channel max
    so large exponents do not overflow.
    """
    p = np.exp(log_p)[None, :, None]
    xc = np.maximum(x, GEM_CLAMP)
    s = xc.max(axis=2, keepdims=True)
    r = xc / s
    rp = r ** p
    m = rp.mean(axis=2, keepdims=True)
    f = s * m ** (1.0 / p)
    return f[..., 0], (x, p, r, rp, m, f)


def gem_backward(df: np.ndarray, cache):
    x, p, r, rp, m, f = cache
    n = x.shape[2]
    df = df[..., None]
    # d f / d x_n = r_n^(p-1) * m^(1/p - 1) / N
    dx = df * (rp / r) * m ** (1.0 / p - 1.0) / n
    dx = np.where(x > GEM_CLAMP, dx, 0.0)
    mean_rp_logr = (rp * np.log(r)).mean(axis=2, keepdims=True)
    df_dp = f * (-np.log(m) / p**2 + mean_rp_logr / (p * m))
    dlog_p = (df * df_dp * p).sum(axis=(0, 2))
    return dx, dlog_p


def gca_forward(x, log_p, w_down, b_down, w_up, b_up):
    fg, gem_cache = gem_forward(x, log_p)
    pre = fg @ w_down + b_down
    h = gelu(pre)
    g = sigmoid(h @ w_up + b_up)
    return g, (gem_cache, fg, pre, h, g, w_down, w_up)


def gca_backward(dg, cache):
    gem_cache, fg, pre, h, g, w_down, w_up = cache
    dz = dg * g * (1.0 - g)
    dw_up = h.T @ dz
    db_up = dz.sum(0)
    dpre = (dz @ w_up.T) * gelu_grad(pre)
    dw_down = fg.T @ dpre
    db_down = dpre.sum(0)
    dx, dlog_p = gem_backward(dpre @ w_down.T, gem_cache)
    return dx, dlog_p, dw_down, db_down, dw_up, db_up


# -- public single-map operations ------------------------------------------

def _checked_tokens(fm) -> np.ndarray:
    x = as_tokens(fm)
    if np.any(x < 0):
        raise ValueError("GeM pooling needs nonnegative inputs")
    return x


def gem_pool(fm, p: GemParams | np.ndarray | float) -> np.ndarray:
    """Per-channel generalized mean of a feature map.

    ``p`` may be a :class:`GemParams` or raw exponents (scalar or [C]).
    Values below 1e-6 are clamped before exponentiation.
    """
    if not isinstance(p, GemParams):
        p = GemParams.from_p(p)
    x = _checked_tokens(fm)
    log_p = np.broadcast_to(p.log_p, (x.shape[1],))
    f, _ = gem_forward(x, log_p)
    return f[0] if is_single(fm) else f


def gca_gate(fm, g: GcaParams) -> np.ndarray:
    """Channel gate in (0, 1) computed from a second GeM pooling of ``fm``."""
    x = _checked_tokens(fm)
    out, _ = gca_forward(x, g.gate_p.log_p, g.w_down, g.b_down, g.w_up, g.b_up)
    return out[0] if is_single(fm) else out


def g2m_forward(fm, params: G2mParams) -> np.ndarray:
    _checked_tokens(fm)
    return G2mHead.from_params(params)(fm)


# -- heads -------------------------------------------------------------------

class GemHead(Head):
    """GeM pooling, a fully connected layer and L2 normalization."""

    kind = "gem"

    @classmethod
    def create(cls, channels: int, out_dim: int | None = None, rng=None) -> "GemHead":
        rng = np.random.default_rng(rng)
        out_dim = channels if out_dim is None else out_dim
        return cls({
            "gem.log_p": GemParams.init(channels).log_p,
            "fc.w": rng.uniform(-1, 1, (channels, out_dim)) / np.sqrt(channels),
            "fc.b": np.zeros(out_dim),
        })

    @property
    def out_dim(self) -> int:
        return self.params["fc.w"].shape[1]

    def config(self):
        c, d = self.params["fc.w"].shape
        return {"kind": self.kind, "channels": c, "out_dim": d}

    def forward(self, x, cls=None, params=None):
        P = self.params if params is None else params
        f, gem_cache = gem_forward(x, P["gem.log_p"])
        y = f @ P["fc.w"] + P["fc.b"]
        d, norm = l2_normalize(y)
        return d, (gem_cache, f, d, norm, P)

    def backward(self, dd, cache):
        gem_cache, f, d, norm, P = cache
        dy = l2_normalize_backward(dd, d, norm)
        grads = {"fc.w": f.T @ dy, "fc.b": dy.sum(0)}
        dx, grads["gem.log_p"] = gem_backward(dy @ P["fc.w"].T, gem_cache)
        return grads, dx, None


class G2mHead(Head):
    """GeM pooling gated channel-wise by the GCA branch, then FC and L2 norm."""

    kind = "g2m"

    @classmethod
    def create(cls, channels: int = 768, rank: int = 64, out_dim: int | None = None, rng=None) -> "G2mHead":
        return cls.from_params(G2mParams.init(channels, rank, out_dim, rng))

    @classmethod
    def from_params(cls, p: G2mParams) -> "G2mHead":
        return cls({
            "gem.log_p": np.asarray(p.main_p.log_p, dtype=np.float64),
            "gca.log_p": np.asarray(p.gca.gate_p.log_p, dtype=np.float64),
            "gca.w_down": p.gca.w_down,
            "gca.b_down": p.gca.b_down,
            "gca.w_up": p.gca.w_up,
            "gca.b_up": p.gca.b_up,
            "fc.w": p.w_fc,
            "fc.b": p.b_fc,
        })

    def to_params(self) -> G2mParams:
        P = self.params
        gca = GcaParams(P["gca.w_down"], P["gca.b_down"], P["gca.w_up"], P["gca.b_up"], GemParams(P["gca.log_p"]))
        return G2mParams(GemParams(P["gem.log_p"]), gca, P["fc.w"], P["fc.b"])

    @property
    def out_dim(self) -> int:
        return self.params["fc.w"].shape[1]

    @property
    def rank(self) -> int:
        return self.params["gca.w_down"].shape[1]

    def weight_count(self) -> int:
        return self.n_params(["gca.w_down", "gca.w_up", "fc.w"])

    def config(self):
        c, d = self.params["fc.w"].shape
        return {"kind": self.kind, "channels": c, "rank": self.rank, "out_dim": d}

    def forward(self, x, cls=None, params=None):
        P = self.params if params is None else params
        f, gem_cache = gem_forward(x, P["gem.log_p"])
        g, gca_cache = gca_forward(x, P["gca.log_p"], P["gca.w_down"], P["gca.b_down"], P["gca.w_up"], P["gca.b_up"])
        z = f * g
        y = z @ P["fc.w"] + P["fc.b"]
        d, norm = l2_normalize(y)
        return d, (gem_cache, gca_cache, f, g, z, d, norm, P)

    def backward(self, dd, cache):
        gem_cache, gca_cache, f, g, z, d, norm, P = cache
        dy = l2_normalize_backward(dd, d, norm)
        grads = {"fc.w": z.T @ dy, "fc.b": dy.sum(0)}
        dz = dy @ P["fc.w"].T
        dx_main, grads["gem.log_p"] = gem_backward(dz * g, gem_cache)
        dx_gate, dlp, dwd, dbd, dwu, dbu = gca_backward(dz * f, gca_cache)
        grads.update({"gca.log_p": dlp, "gca.w_down": dwd, "gca.b_down": dbd, "gca.w_up": dwu, "gca.b_up": dbu})
        return grads, dx_main + dx_gate, None
