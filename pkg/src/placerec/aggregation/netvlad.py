"""NetVLAD and NetVLAD-Linear heads.

The linear variant applies one C x C' matrix to every intra-normalized
cluster residual, so its weight count is C*C' regardless of K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from ..numerics import l2_normalize, l2_normalize_backward
from .base import Head, as_tokens, is_single

ASSIGN_GAMMA = 10.0
CLS_DIM = 256


@dataclass
class NetVladParams:
    centers: np.ndarray  # [K, C]
    assign_w: np.ndarray  # [K, C]
    assign_b: np.ndarray  # [K]

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError("NetVLAD needs at least one cluster")
        if self.assign_w.shape != self.centers.shape or self.assign_b.shape != (self.centers.shape[0],):
            raise ValueError("assignment parameters do not match the centers")

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def C(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def from_centers(cls, centers: np.ndarray, gamma: float = ASSIGN_GAMMA) -> "NetVladParams":
        centers = np.array(centers, dtype=np.float64)
        return cls(centers, 2.0 * gamma * centers, -gamma * np.sum(centers**2, axis=1))

    @classmethod
    def init(cls, channels: int, clusters: int = 64, samples: np.ndarray | None = None, rng=None) -> "NetVladParams":
        """Centers from k-means over ``samples`` [n, C] when given, else random."""
        if clusters < 1:
            raise ValueError("K must be >= 1")
        rng = np.random.default_rng(rng)
        if samples is None:
            centers = np.abs(rng.standard_normal((clusters, channels))) / np.sqrt(channels)
        else:
            samples = np.asarray(samples, dtype=np.float64)
            seed = int(rng.integers(2**31))
            centers, _ = kmeans2(samples, clusters, minit="++", seed=seed)
        return cls.from_centers(centers)


@dataclass
class NvlParams:
    vlad: NetVladParams
    w_proj: np.ndarray  # [C, C']

    def __post_init__(self):
        c, c_out = self.w_proj.shape
        if c != self.vlad.C:
            raise ValueError(f"projection expects {c} input channels, clusters have {self.vlad.C}")
        if c_out > c:
            raise ValueError(f"projected dimension {c_out} exceeds channel count {c}")

    @property
    def out_per_cluster(self) -> int:
        return self.w_proj.shape[1]

    @property
    def out_dim(self) -> int:
        return self.vlad.K * self.out_per_cluster


def init_projection(channels: int, out_per_cluster: int, rng=None) -> np.ndarray:
    """Random matrix with orthonormal columns."""
    if out_per_cluster > channels:
        raise ValueError(f"projected dimension {out_per_cluster} exceeds channel count {channels}")
    rng = np.random.default_rng(rng)
    q, _ = np.linalg.qr(rng.standard_normal((channels, out_per_cluster)))
    return q


# -- batched core -------------------------------------------------------------

def vlad_residuals_forward(x, centers, assign_w, assign_b):
    """Soft-assigned, intra-normalized residuals [B, K, C] for tokens [B, C, N]."""
    logits = np.einsum("kc,bcn->bkn", assign_w, x) + assign_b[None, :, None]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    a = e / e.sum(axis=1, keepdims=True)
    asum = a.sum(axis=2)
    v = np.einsum("bkn,bcn->bkc", a, x) - asum[..., None] * centers[None]
    vn, norm = l2_normalize(v, axis=2)
    return vn, (x, a, asum, vn, norm, centers, assign_w)


def vlad_residuals_backward(dvn, cache):
    x, a, asum, vn, norm, centers, assign_w = cache
    dv = l2_normalize_backward(dvn, vn, norm, axis=2)
    dcenters = -np.einsum("bk,bkc->kc", asum, dv)
    da = np.einsum("bkc,bcn->bkn", dv, x) - np.einsum("bkc,kc->bk", dv, centers)[..., None]
    dx = np.einsum("bkn,bkc->bcn", a, dv)
    dlogits = a * (da - np.sum(a * da, axis=1, keepdims=True))
    dw = np.einsum("bkn,bcn->kc", dlogits, x)
    db = dlogits.sum(axis=(0, 2))
    dx += np.einsum("kc,bkn->bcn", assign_w, dlogits)
    return dx, dcenters, dw, db


# -- public single-map operations --------------------------------------------

def netvlad_forward(fm, params: NetVladParams) -> np.ndarray:
    """K*C NetVLAD descriptor: intra-normalized residuals, flattened, L2-normalized."""
    return NetVladHead.from_params(params)(fm)


def nvl_forward(fm, params: NvlParams) -> np.ndarray:
    return NvlHead.from_params(params)(fm)


def nvl_cls_forward(fm, params: NvlParams, w_cls: np.ndarray, cls=None) -> np.ndarray:
    """NVL descriptor concatenated with a projected CLS token, jointly normalized."""
    cls = getattr(fm, "cls", None) if cls is None else cls
    if cls is None:
        raise ValueError("this head needs a CLS vector")
    head = NvlHead.from_params(params, w_cls=w_cls)
    return head(fm, cls)


# -- heads -------------------------------------------------------------------

class NetVladHead(Head):
    kind = "netvlad"

    @classmethod
    def create(cls, channels: int = 768, clusters: int = 64, samples=None, rng=None) -> "NetVladHead":
        return cls.from_params(NetVladParams.init(channels, clusters, samples, rng))

    @classmethod
    def from_params(cls, p: NetVladParams) -> "NetVladHead":
        return cls({"vlad.centers": p.centers, "vlad.assign_w": p.assign_w, "vlad.assign_b": p.assign_b})

    @property
    def K(self) -> int:
        return self.params["vlad.centers"].shape[0]

    @property
    def C(self) -> int:
        return self.params["vlad.centers"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.K * self.C

    def config(self):
        return {"kind": self.kind, "channels": self.C, "clusters": self.K}

    def forward(self, x, cls=None, params=None):
        P = self.params if params is None else params
        vn, rcache = vlad_residuals_forward(x, P["vlad.centers"], P["vlad.assign_w"], P["vlad.assign_b"])
        b = vn.shape[0]
        d, norm = l2_normalize(vn.reshape(b, -1))
        return d, (rcache, vn.shape, d, norm)

    def backward(self, dd, cache):
        rcache, shape, d, norm = cache
        dvn = l2_normalize_backward(dd, d, norm).reshape(shape)
        dx, dc, dw, db = vlad_residuals_backward(dvn, rcache)
        return {"vlad.centers": dc, "vlad.assign_w": dw, "vlad.assign_b": db}, dx, None


class NvlHead(Head):
    """NetVLAD followed by a shared per-cluster linear projection.

    With ``use_projection=False`` the head emits the plain K*C NetVLAD
    descriptor while still carrying ``proj.w``; this is the high-dimensional
    first stage of the two-stage schedule.  With ``w_cls`` present the
    projected CLS token is appended before the final normalization.
    """

    kind = "nvl"

    def __init__(self, params, use_projection: bool = True):
        super().__init__(params)
        self.use_projection = use_projection

    @property
    def uses_cls(self) -> bool:
        return "cls.w" in self.params

    @classmethod
    def create(cls, channels: int = 768, clusters: int = 64, out_per_cluster: int = 128,
               with_cls: bool = False, samples=None, rng=None) -> "NvlHead":
        rng = np.random.default_rng(rng)
        vlad = NetVladParams.init(channels, clusters, samples, rng)
        w_cls = rng.standard_normal((channels, CLS_DIM)) / np.sqrt(channels) if with_cls else None
        return cls.from_params(NvlParams(vlad, init_projection(channels, out_per_cluster, rng)), w_cls)

    @classmethod
    def from_params(cls, p: NvlParams, w_cls: np.ndarray | None = None) -> "NvlHead":
        params = {
            "vlad.centers": p.vlad.centers,
            "vlad.assign_w": p.vlad.assign_w,
            "vlad.assign_b": p.vlad.assign_b,
            "proj.w": p.w_proj,
        }
        if w_cls is not None:
            params["cls.w"] = np.asarray(w_cls, dtype=np.float64)
        return cls(params)

    @property
    def K(self) -> int:
        return self.params["vlad.centers"].shape[0]

    @property
    def C(self) -> int:
        return self.params["vlad.centers"].shape[1]

    @property
    def out_per_cluster(self) -> int:
        return self.params["proj.w"].shape[1]

    @property
    def out_dim(self) -> int:
        body = self.K * (self.out_per_cluster if self.use_projection else self.C)
        return body + (self.params["cls.w"].shape[1] if self.uses_cls else 0)

    def projection_count(self) -> int:
        return self.params["proj.w"].size

    def config(self):
        return {"kind": self.kind, "channels": self.C, "clusters": self.K,
                "out_per_cluster": self.out_per_cluster, "with_cls": self.uses_cls,
                "use_projection": self.use_projection}

    def forward(self, x, cls=None, params=None):
        P = self.params if params is None else params
        vn, rcache = vlad_residuals_forward(x, P["vlad.centers"], P["vlad.assign_w"], P["vlad.assign_b"])
        b = vn.shape[0]
        body = np.einsum("bkc,cd->bkd", vn, P["proj.w"]) if self.use_projection else vn
        parts = [body.reshape(b, -1)]
        if self.uses_cls:
            if cls is None:
                raise ValueError("this head needs a CLS vector")
            parts.append(cls @ P["cls.w"])
        d, norm = l2_normalize(np.concatenate(parts, axis=1))
        return d, (rcache, vn, body.shape, cls, d, norm, P)

    def backward(self, dd, cache):
        rcache, vn, body_shape, cls, d, norm, P = cache
        dy = l2_normalize_backward(dd, d, norm)
        n_body = int(np.prod(body_shape[1:]))
        dbody = dy[:, :n_body].reshape(body_shape)
        grads = {}
        if self.use_projection:
            grads["proj.w"] = np.einsum("bkc,bkd->cd", vn, dbody)
            dvn = np.einsum("bkd,cd->bkc", dbody, P["proj.w"])
        else:
            grads["proj.w"] = np.zeros_like(P["proj.w"])
            dvn = dbody
        dcls = None
        if self.uses_cls:
            dc = dy[:, n_body:]
            grads["cls.w"] = cls.T @ dc
            dcls = dc @ P["cls.w"].T
        dx, grads["vlad.centers"], grads["vlad.assign_w"], grads["vlad.assign_b"] = vlad_residuals_backward(dvn, rcache)
        return grads, dx, dcls


def netvlad_residual_matrix(fm, params: NetVladParams) -> np.ndarray:
    """Intra-normalized residual matrix [K, C] (or [B, K, C] for a batch)."""
    x = as_tokens(fm)
    vn, _ = vlad_residuals_forward(x, params.centers, params.assign_w, params.assign_b)
    return vn[0] if is_single(fm) else vn
