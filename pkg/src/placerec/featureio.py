"""Binary formats for feature maps, checkpoints and descriptor databases,
plus a small trainable backbone.

All integers and floats are little-endian.

Feature file (``SPFM``)::

    magic "SPFM" | version u32 | C u32 | H u32 | W u32 | has_cls u8
    | C*H*W float32 (channel-major, row-major) | C float32 if has_cls

Checkpoint (``SPCK``)::

    magic "SPCK" | version u32 | stage: u8 length + ascii
    | metadata: u32 length + UTF-8 JSON | tensor count u32
    | per tensor: u16 name length, UTF-8 name, u8 dtype (0 f32, 1 f64),
      u8 ndim, ndim x u32 dims, raw data

Descriptor database (``SPDB``)::

    magic "SPDB" | N u64 | D u32 | N*D float32

with a JSON-lines sidecar at ``<path>.jsonl``, one object per row.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .aggregation.base import FeatureMap
from .numerics import GELU_MIN_OFFSET, gelu, gelu_grad

FEATURE_MAGIC = b"SPFM"
CHECKPOINT_MAGIC = b"SPCK"
DB_MAGIC = b"SPDB"
FEATURE_VERSION = 1
CHECKPOINT_VERSION = 1
STAGES = ("stage1", "stage2")

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    code = "format"

    def __init__(self, path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path


class BadMagicError(FormatError):
    code = "bad_magic"


class UnsupportedVersionError(FormatError):
    code = "bad_version"


class TruncatedFileError(FormatError):
    code = "truncated"


class TrailingDataError(FormatError):
    code = "trailing_data"


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(self.path, f"needs {self.pos + n} bytes, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def magic(self, expected: bytes) -> None:
        got = self.data[:len(expected)]
        if got != expected:
            raise BadMagicError(self.path, f"expected magic {expected!r}, found {got!r}")
        self.pos = len(expected)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise TrailingDataError(self.path, f"{len(self.data) - self.pos} unexpected trailing bytes")


# -- feature maps ---------------------------------------------------------------

def write_feature(path, fm: FeatureMap) -> None:
    v = np.ascontiguousarray(fm.values, dtype="<f4")
    c, h, w = v.shape
    has_cls = fm.cls is not None
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<IIIIB", FEATURE_VERSION, c, h, w, int(has_cls)))
        fh.write(v.tobytes())
        if has_cls:
            fh.write(np.ascontiguousarray(fm.cls, dtype="<f4").tobytes())


def read_feature(path) -> FeatureMap:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(FEATURE_MAGIC)
    (version,) = r.unpack("I")
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(path, f"feature file version {version}, expected {FEATURE_VERSION}")
    c, h, w, has_cls = r.unpack("IIIB")
    values = np.frombuffer(r.take(4 * c * h * w), dtype="<f4").reshape(c, h, w).astype(np.float32)
    cls = np.frombuffer(r.take(4 * c), dtype="<f4").astype(np.float32) if has_cls else None
    r.finish()
    return FeatureMap(values, cls)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage tag {self.stage!r} not in {STAGES}")


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    stage = ckpt.stage.encode("ascii")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IB", CHECKPOINT_VERSION, len(stage)), stage,
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        t = np.asarray(ckpt.tensors[name])
        if t.dtype not in _DTYPE_CODES:
            raise TypeError(f"tensor {name} has unsupported dtype {t.dtype}")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(CHECKPOINT_MAGIC)
    (version,) = r.unpack("I")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(path, f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (n,) = r.unpack("B")
    stage = r.take(n).decode("ascii", errors="replace")
    if stage not in STAGES:
        raise FormatError(path, f"unknown stage tag {stage!r}")
    (n,) = r.unpack("I")
    meta = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("H")
        name = r.take(n).decode("utf-8")
        code, ndim = r.unpack("BB")
        if code not in _DTYPES:
            raise FormatError(path, f"unknown dtype code {code} for {name}")
        dtype = _DTYPES[code]
        shape = r.unpack(f"{ndim}I") if ndim else ()
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    r.finish()
    return Checkpoint(stage, tensors, meta)


# -- descriptor database file ------------------------------------------------------

DB_META_FIELDS = ("image_id", "east", "north", "frame", "match_id")


def db_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".jsonl")


def write_db(path, vectors: np.ndarray, metadata: list[Mapping[str, Any]]) -> None:
    v = np.ascontiguousarray(vectors, dtype="<f4")
    n, d = v.shape
    if len(metadata) != n:
        raise ValueError(f"{len(metadata)} metadata rows for {n} vectors")
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC + struct.pack("<QI", n, d))
        fh.write(v.tobytes())
    with open(db_sidecar_path(path), "w", encoding="utf-8") as fh:
        for i, m in enumerate(metadata):
            row = {"row": i}
            row.update({k: m.get(k) for k in DB_META_FIELDS})
            fh.write(json.dumps(row) + "\n")


def read_db(path) -> tuple[np.ndarray, list[dict[str, Any]]]:
    r = _Reader(Path(path).read_bytes(), path)
    r.magic(DB_MAGIC)
    n, d = r.unpack("QI")
    vectors = np.frombuffer(r.take(4 * n * d), dtype="<f4").reshape(n, d).astype(np.float32)
    r.finish()
    side = db_sidecar_path(path)
    metadata: list[dict[str, Any]] = []
    if side.exists():
        with open(side, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    metadata.append({k: row.get(k) for k in DB_META_FIELDS})
        if len(metadata) != n:
            raise FormatError(side, f"{len(metadata)} sidecar rows for {n} vectors")
    else:
        metadata = [{k: None for k in DB_META_FIELDS} for _ in range(n)]
    return vectors, metadata


# -- toy backbone ------------------------------------------------------------

class ToyBackbone:
    """Patch embedding followed by ``h <- gelu(h W + b)`` blocks.

    Only the last ``n_trainable_tail`` blocks are trainable; the embedding
    is always frozen.  The output activation ``relu(gelu(h) + 0.17)`` keeps
    every value nonnegative for GeM pooling.  The embedding is optional: a
    backbone without one runs its blocks directly on precomputed feature
    maps whose channel count matches.
    """

    def __init__(self, params: dict[str, np.ndarray], n_blocks: int, n_trainable_tail: int = 4, patch: int = 14):
        self.params = params
        self.n_blocks = n_blocks
        self.n_trainable_tail = min(n_trainable_tail, n_blocks)
        self.patch = patch

    @classmethod
    def create(cls, channels: int = 32, n_blocks: int = 6, n_trainable_tail: int = 4, patch: int = 14,
               with_embed: bool = True, init_scale: float = 0.1, rng=None) -> "ToyBackbone":
        rng = np.random.default_rng(rng)
        params = {}
        if with_embed:
            params["backbone.patch_embed"] = rng.standard_normal((patch * patch * 3, channels)) / np.sqrt(patch * patch * 3)
        for i in range(n_blocks):
            noise = init_scale * rng.standard_normal((channels, channels)) / np.sqrt(channels)
            params[f"backbone.block{i}.w"] = np.eye(channels) + noise
            params[f"backbone.block{i}.b"] = np.zeros(channels)
        return cls(params, n_blocks, n_trainable_tail, patch)

    @property
    def channels(self) -> int:
        return self.params["backbone.block0.w"].shape[0] if self.n_blocks else self.params["backbone.patch_embed"].shape[1]

    def config(self) -> dict[str, Any]:
        return {"n_blocks": self.n_blocks, "n_trainable_tail": self.n_trainable_tail, "patch": self.patch,
                "with_embed": "backbone.patch_embed" in self.params}

    def trainable_names(self) -> list[str]:
        first = self.n_blocks - self.n_trainable_tail
        return [f"backbone.block{i}.{p}" for i in range(first, self.n_blocks) for p in ("w", "b")]

    def embed(self, images: np.ndarray) -> tuple[np.ndarray, int, int]:
        """Patchify [B, 3, hp, wp] images into tokens [B, C, H*W]."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        b, ch, hp, wp = images.shape
        p = self.patch
        if ch != 3 or hp % p or wp % p:
            raise ValueError(f"image shape {images.shape[1:]} not 3 x (k*{p}) x (m*{p})")
        if "backbone.patch_embed" not in self.params:
            raise ValueError("this backbone has no patch embedding")
        h, w = hp // p, wp // p
        patches = images.reshape(b, 3, h, p, w, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, h * w, 3 * p * p)
        tokens = patches @ self.params["backbone.patch_embed"]
        return tokens.transpose(0, 2, 1), h, w

    def forward(self, x: np.ndarray, params=None):
        """Run the blocks on tokens [B, C, N]; returns (out [B, C, N], cache)."""
        P = self.params if params is None else params
        h = x.transpose(0, 2, 1)
        inputs = []
        for i in range(self.n_blocks):
            pre = h @ P[f"backbone.block{i}.w"] + P[f"backbone.block{i}.b"]
            inputs.append((h, pre))
            h = gelu(pre)
        out = np.maximum(gelu(h) + GELU_MIN_OFFSET, 0.0)
        return out.transpose(0, 2, 1), (inputs, h, P)

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Gradients for every block; frozen blocks get exact zeros."""
        inputs, h, P = cache
        grads = {n: np.zeros_like(P[n]) for n in P if n != "backbone.patch_embed"}
        first = self.n_blocks - self.n_trainable_tail
        if self.n_trainable_tail == 0:
            return grads
        act = gelu(h) + GELU_MIN_OFFSET
        dh = dout.transpose(0, 2, 1) * gelu_grad(h) * (act > 0)
        for i in range(self.n_blocks - 1, first - 1, -1):
            hin, pre = inputs[i]
            dpre = dh * gelu_grad(pre)
            grads[f"backbone.block{i}.w"] = np.einsum("bnc,bnd->cd", hin, dpre)
            grads[f"backbone.block{i}.b"] = dpre.sum(axis=(0, 1))
            dh = dpre @ P[f"backbone.block{i}.w"].T
        return grads

    def input_grad(self, dout: np.ndarray, cache) -> np.ndarray:
        """Gradient w.r.t. the block input, used only by gradient checks."""
        inputs, h, P = cache
        act = gelu(h) + GELU_MIN_OFFSET
        dh = dout.transpose(0, 2, 1) * gelu_grad(h) * (act > 0)
        for i in range(self.n_blocks - 1, -1, -1):
            _, pre = inputs[i]
            dh = (dh * gelu_grad(pre)) @ P[f"backbone.block{i}.w"].T
        return dh.transpose(0, 2, 1)


def toy_forward(image: np.ndarray, b: ToyBackbone) -> FeatureMap:
    """Feature map of one [3, hp, wp] image; CLS is the mean output token."""
    tokens, h, w = b.embed(image)
    out, _ = b.forward(tokens)
    values = out[0].reshape(-1, h, w)
    return FeatureMap(values, out[0].mean(axis=1))
