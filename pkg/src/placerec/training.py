"""P x K batch sampling, Adam, and the one- and two-stage training schedules.

A :class:`PlaceModel` is an optional trainable backbone tail followed by an
aggregation head, with all parameters in one flat name -> array dict.  The
two-stage schedule for NetVLAD-Linear first trains the backbone tail and
the NetVLAD core on the K*C descriptor, then freezes them and trains only
the shared projection ``proj.w`` on the projected descriptor.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .aggregation import G2mHead, GemHead, NetVladHead, NvlHead, as_tokens, head_from_config
from .aggregation.base import Head
from .aggregation.netvlad import vlad_residuals_forward
from .featureio import Checkpoint, ToyBackbone
from .loss import MsLossConfig, ms_loss_descriptors
from .numerics import l2_normalize, l2_normalize_backward
from .sla import PlaceLabel, global_class_ids

log = logging.getLogger(__name__)

HEAD_CHOICES = ("gem", "g2m", "netvlad", "nvl", "nvl-ft2")


class NonFiniteLossError(FloatingPointError):
    """Raised when a step produces a non-finite loss; carries the last good checkpoint."""

    def __init__(self, step: int, checkpoint: Checkpoint):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint


class InsufficientClassesError(ValueError):
    pass


@dataclass(frozen=True)
class BatchSpec:
    places_per_batch: int = 16
    images_per_place: int = 4
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.places_per_batch * self.images_per_place


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-5
    epochs_stage1: int = 10
    epochs_stage2: int | None = None  # None: half of epochs_stage1
    warmup_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss: MsLossConfig = field(default_factory=MsLossConfig)
    resolution: str = "224"

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError("learning rate must be finite and >= 0")

    @property
    def stage2_epochs(self) -> int:
        return max(1, self.epochs_stage1 // 2) if self.epochs_stage2 is None else self.epochs_stage2

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


# -- sampling ---------------------------------------------------------------------

@dataclass
class MiniBatch:
    indices: np.ndarray  # image indices into the training set
    classes: np.ndarray  # class id per image


def class_ids_of(labels) -> np.ndarray:
    """Integer class per image from PlaceLabels or plain ids."""
    labels = list(labels)
    if labels and isinstance(labels[0], PlaceLabel):
        ids = global_class_ids(labels)
        return np.array([ids[lab.image_id] for lab in labels])
    return np.asarray(labels)


class BatchSampler:
    """Each epoch visits every eligible class at most once, in P_b-class batches.

    Classes with fewer than K_b images are skipped (with a warning); each
    batch holds K_b distinct images per class.  The order depends only on
    ``(spec.seed, epoch)``.
    """

    def __init__(self, labels, spec: BatchSpec = BatchSpec()):
        self.spec = spec
        self.classes = class_ids_of(labels)
        members: dict[Any, list[int]] = defaultdict(list)
        for i, c in enumerate(self.classes.tolist()):
            members[c].append(i)
        self.members = {c: np.array(m) for c, m in members.items() if len(m) >= spec.images_per_place}
        skipped = len(members) - len(self.members)
        if skipped:
            log.warning("skipping %d classes with fewer than %d images", skipped, spec.images_per_place)
        if len(self.members) < spec.places_per_batch:
            raise InsufficientClassesError(
                f"need {spec.places_per_batch} classes with >= {spec.images_per_place} images, "
                f"found {len(self.members)} (short by {spec.places_per_batch - len(self.members)})")
        self.class_list = sorted(self.members)

    def batches_per_epoch(self) -> int:
        return len(self.class_list) // self.spec.places_per_batch

    def epoch(self, epoch: int) -> list[MiniBatch]:
        rng = np.random.default_rng([self.spec.seed, epoch])
        order = rng.permutation(len(self.class_list))
        pb, kb = self.spec.places_per_batch, self.spec.images_per_place
        out = []
        for start in range(0, len(order) - pb + 1, pb):
            idx, cls = [], []
            for ci in order[start:start + pb]:
                c = self.class_list[ci]
                idx.extend(rng.choice(self.members[c], size=kb, replace=False))
                cls.extend([c] * kb)
            out.append(MiniBatch(np.array(idx), np.array(cls)))
        return out


def sample_batch(labels, spec: BatchSpec, epoch_state: tuple[int, int] = (0, 0)) -> MiniBatch:
    """Batch number ``epoch_state[1]`` of epoch ``epoch_state[0]``."""
    epoch, i = epoch_state
    return BatchSampler(labels, spec).epoch(epoch)[i]


# -- optimizer -------------------------------------------------------------------------

class Adam:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], names: Iterable[str], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n in names:
            g = grads[n]
            m = self.m.setdefault(n, np.zeros_like(g))
            v = self.v.setdefault(n, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr:
                params[n] = params[n] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- model ---------------------------------------------------------------------------

class PlaceModel:
    def __init__(self, head: Head, backbone: ToyBackbone | None = None):
        self.head = head
        self.backbone = backbone

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.backbone.params) if self.backbone else {}
        out.update(self.head.params)
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for n, v in params.items():
            if n.startswith("backbone."):
                self.backbone.params[n] = v
            else:
                self.head.params[n] = v

    def features(self, maps, params=None):
        """Backbone-tail output tokens [B, C, N] and CLS [B, C]."""
        x = as_tokens(maps)
        if self.backbone is None:
            return x, x.mean(axis=2), None
        out, cache = self.backbone.forward(x, params)
        return out, out.mean(axis=2), cache

    def forward(self, maps, params=None):
        P = self.params if params is None else params
        x, cls, bcache = self.features(maps, P)
        d, hcache = self.head.forward(x, cls if self.head.uses_cls else None, P)
        return d, (bcache, hcache, x.shape[2])

    def backward(self, dd, cache) -> dict[str, np.ndarray]:
        bcache, hcache, n = cache
        grads, dx, dcls = self.head.backward(dd, hcache)
        grads = dict(grads)
        if self.backbone is not None:
            if dcls is not None:
                dx = dx + dcls[:, :, None] / n
            grads.update(self.backbone.backward(dx, bcache))
        return grads

    def describe(self, maps, batch: int = 256) -> np.ndarray:
        maps = np.asarray(maps)
        return np.concatenate([self.forward(maps[i:i + batch])[0] for i in range(0, len(maps), batch)])

    def config(self) -> dict[str, Any]:
        return {"head": self.head.config(), "backbone": self.backbone.config() if self.backbone else None}

    def to_checkpoint(self, stage: str, **meta) -> Checkpoint:
        tensors = {n: np.array(v, copy=True) for n, v in self.params.items()}
        return Checkpoint(stage, tensors, {"model": self.config(), **meta})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PlaceModel":
        cfg = ckpt.meta["model"]
        t = {n: np.array(v, copy=True) for n, v in ckpt.tensors.items()}
        head = head_from_config(cfg["head"], {n: v for n, v in t.items() if not n.startswith("backbone.")})
        backbone = None
        if cfg.get("backbone"):
            b = cfg["backbone"]
            backbone = ToyBackbone({n: v for n, v in t.items() if n.startswith("backbone.")},
                                   b["n_blocks"], b["n_trainable_tail"], b["patch"])
        return cls(head, backbone)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def build_model(head: str, channels: int, *, rank: int = 64, out_dim: int | None = None, clusters: int = 64,
                out_per_cluster: int = 128, with_cls: bool = False, backbone_blocks: int = 4,
                n_trainable_tail: int = 4, init_maps=None, rng=None) -> PlaceModel:
    """A backbone tail (no patch embedding) plus the named head.

    ``init_maps`` (training feature maps) seeds the NetVLAD centers by
    k-means over their patch vectors after the backbone tail.
    """
    if head not in HEAD_CHOICES:
        raise ValueError(f"unknown head {head!r}; choose from {HEAD_CHOICES}")
    rng = np.random.default_rng(rng)
    backbone = None
    if backbone_blocks:
        backbone = ToyBackbone.create(channels, backbone_blocks, n_trainable_tail, with_embed=False, rng=rng)
    samples = None
    if head in ("netvlad", "nvl", "nvl-ft2") and init_maps is not None:
        samples = _patch_sample(backbone, init_maps, rng)
    if head == "gem":
        h: Head = GemHead.create(channels, out_dim, rng=rng)
    elif head == "g2m":
        h = G2mHead.create(channels, rank, out_dim, rng=rng)
    elif head == "netvlad":
        h = NetVladHead.create(channels, clusters, samples, rng=rng)
    else:
        h = NvlHead.create(channels, clusters, out_per_cluster, with_cls, samples, rng=rng)
        h.use_projection = head == "nvl"
    return PlaceModel(h, backbone)


def _patch_sample(backbone, maps, rng, n: int = 4096) -> np.ndarray:
    maps = np.asarray(maps)
    take = rng.choice(len(maps), size=min(len(maps), max(1, n // (maps.shape[2] * maps.shape[3]))), replace=False)
    x = as_tokens(maps[np.sort(take)])
    if backbone is not None:
        x, _ = backbone.forward(x)
    return x.transpose(0, 2, 1).reshape(-1, x.shape[1])


def stage_plan(model: PlaceModel, stage: str, one_shot: bool = False) -> list[str]:
    """Names of the tensors trained in ``stage``."""
    if stage == "stage2":
        return ["proj.w"]
    names = model.backbone.trainable_names() if model.backbone else []
    head_names = list(model.head.params)
    if isinstance(model.head, NvlHead) and not model.head.use_projection and not one_shot:
        head_names = [n for n in head_names if n.startswith("vlad.")]
    return names + head_names


# -- loops ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]
    log: list[dict[str, Any]]
    trainable: list[str]

    @property
    def trainable_count(self) -> int:
        return int(sum(self.checkpoint.tensors[n].size for n in self.trainable))


def _loss(d, classes, cfg: TrainConfig):
    # NaN descriptors surface as a NaN loss so the loop can hand back the last good state
    if not np.all(np.isfinite(d)):
        return float("nan"), None
    return ms_loss_descriptors(d, classes, cfg.loss)


def _run(model: PlaceModel, maps, labels, cfg: TrainConfig, spec: BatchSpec, stage: str, epochs: int,
         trainable: list[str], step_fn: Callable, log_sink: Callable[[dict], None] | None) -> TrainResult:
    sampler = BatchSampler(labels, spec)
    if cfg.lr == 0:
        log.warning("learning rate is 0; parameters will not change")
    params = model.params
    opt = Adam(cfg.betas, cfg.adam_eps)
    entries: list[dict[str, Any]] = []
    epoch_losses = []
    step = 0
    last_good = model.to_checkpoint(stage)
    for epoch in range(epochs):
        losses = []
        for mb in sampler.epoch(epoch):
            loss, grads = step_fn(params, mb)
            if not math.isfinite(loss):
                raise NonFiniteLossError(step, last_good)
            lr = cfg.lr_at(step)
            opt.step(params, grads, trainable, lr)
            model.set_params({n: params[n] for n in trainable})
            entry = {"step": step, "epoch": epoch, "loss": loss, "lr": lr, "stage": stage}
            entries.append(entry)
            if log_sink:
                log_sink(entry)
            losses.append(loss)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        last_good = model.to_checkpoint(stage)
    ckpt = model.to_checkpoint(stage, epoch_losses=epoch_losses, trainable=trainable)
    return TrainResult(ckpt, epoch_losses, entries, trainable)


def train_stage1(model: PlaceModel, maps, labels, cfg: TrainConfig = TrainConfig(), spec: BatchSpec = BatchSpec(),
                 epochs: int | None = None, one_shot: bool = False, log_sink=None) -> TrainResult:
    """Train the backbone tail and the head on the MS loss.

    For an ``NvlHead`` with ``use_projection=False`` this is the
    high-dimensional first stage (projection untouched); with
    ``one_shot=True`` (or ``use_projection=True``) the projection trains
    jointly with everything else.
    """
    maps = np.asarray(maps)
    classes = class_ids_of(labels)
    trainable = stage_plan(model, "stage1", one_shot)

    def step_fn(params, mb):
        d, cache = model.forward(maps[mb.indices], params)
        loss, dd = _loss(d, mb.classes, cfg)
        return (loss, None) if dd is None else (loss, model.backward(dd, cache))

    epochs = cfg.epochs_stage1 if epochs is None else epochs
    return _run(model, maps, classes, cfg, spec, "stage1", epochs, trainable, step_fn, log_sink)


def train_stage2_ft2(checkpoint: Checkpoint, maps, labels, cfg: TrainConfig = TrainConfig(),
                     spec: BatchSpec = BatchSpec(), epochs: int | None = None, log_sink=None) -> TrainResult:
    """Train only ``proj.w`` on top of a frozen stage-1 NetVLAD model.

    The frozen part is evaluated once per image up front; each step then
    projects the cached intra-normalized residuals.
    """
    if checkpoint.stage != "stage1":
        raise ValueError(f"expected a stage1 checkpoint, got {checkpoint.stage!r}")
    if "proj.w" not in checkpoint.tensors or "vlad.centers" not in checkpoint.tensors:
        raise ValueError("checkpoint does not hold a NetVLAD-Linear model")
    model = PlaceModel.from_checkpoint(checkpoint)
    model.head.use_projection = True
    maps = np.asarray(maps)
    classes = class_ids_of(labels)
    P = model.params
    vn = np.concatenate([
        vlad_residuals_forward(model.features(maps[i:i + 256])[0], P["vlad.centers"], P["vlad.assign_w"], P["vlad.assign_b"])[0]
        for i in range(0, len(maps), 256)
    ])
    has_cls = model.head.uses_cls
    cls_proj = None
    if has_cls:
        cls_all = np.concatenate([model.features(maps[i:i + 256])[1] for i in range(0, len(maps), 256)])
        cls_proj = cls_all @ P["cls.w"]

    def step_fn(params, mb):
        v = vn[mb.indices]
        body = np.einsum("bkc,cd->bkd", v, params["proj.w"])
        parts = [body.reshape(len(v), -1)]
        if has_cls:
            parts.append(cls_proj[mb.indices])
        d, norm = l2_normalize(np.concatenate(parts, axis=1))
        loss, dd = _loss(d, mb.classes, cfg)
        if dd is None:
            return loss, None
        dy = l2_normalize_backward(dd, d, norm)[:, :body[0].size].reshape(body.shape)
        return loss, {"proj.w": np.einsum("bkc,bkd->cd", v, dy)}

    epochs = cfg.stage2_epochs if epochs is None else epochs
    return _run(model, maps, classes, cfg, spec, "stage2", epochs, ["proj.w"], step_fn, log_sink)


def train_ft2(model: PlaceModel, maps, labels, cfg: TrainConfig = TrainConfig(), spec: BatchSpec = BatchSpec(),
              log_sink=None) -> tuple[TrainResult, TrainResult]:
    """Both stages for an NVL model; returns the two results."""
    model.head.use_projection = False
    r1 = train_stage1(model, maps, labels, cfg, spec, log_sink=log_sink)
    r2 = train_stage2_ft2(r1.checkpoint, maps, labels, cfg, spec, log_sink=log_sink)
    return r1, r2

