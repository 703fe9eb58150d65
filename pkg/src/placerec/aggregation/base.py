from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


@dataclass(frozen=True)
class FeatureMap:
    """A C x H x W backbone output with an optional C-length CLS vector."""

    values: np.ndarray
    cls: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"feature map must be C x H x W, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)
        if self.cls is not None:
            c = np.asarray(self.cls)
            if c.shape != (v.shape[0],):
                raise ValueError(f"cls must have shape ({v.shape[0]},), got {c.shape}")
            object.__setattr__(self, "cls", c)

    @property
    def C(self) -> int:
        return self.values.shape[0]

    @property
    def H(self) -> int:
        return self.values.shape[1]

    @property
    def W(self) -> int:
        return self.values.shape[2]


def is_single(x) -> bool:
    return isinstance(x, FeatureMap) or np.ndim(x) == 3


def as_tokens(x) -> np.ndarray:
    """Coerce a FeatureMap, a [C,H,W] array or a [B,C,H,W] batch to [B,C,N]."""
    if isinstance(x, FeatureMap):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w)


class Head:
    """Base for aggregation heads.

    A head owns a flat ``params`` dict of named float64 arrays.  ``forward``
    works on a batch of token matrices ``x`` of shape [B, C, N] and returns
    ``(descriptors, cache)``; ``backward`` maps the descriptor gradient to
    ``(param_grads, dx, dcls)``.
    """

    kind: str = ""
    uses_cls: bool = False

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @property
    def out_dim(self) -> int:
        raise NotImplementedError

    def config(self) -> dict[str, Any]:
        raise NotImplementedError

    def forward(self, x: np.ndarray, cls: np.ndarray | None = None, params=None):
        raise NotImplementedError

    def backward(self, ddesc: np.ndarray, cache):
        raise NotImplementedError

    def __call__(self, fm, cls=None) -> np.ndarray:
        """Descriptor(s) for a FeatureMap, a [C,H,W] map or a [B,C,H,W] batch."""
        single = is_single(fm)
        if cls is None and isinstance(fm, FeatureMap):
            cls = fm.cls
        x = as_tokens(fm)
        if cls is not None:
            cls = np.asarray(cls, dtype=np.float64).reshape(x.shape[0], -1)
        d, _ = self.forward(x, cls)
        return d[0] if single else d

    def n_params(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))
