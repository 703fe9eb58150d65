"""Deterministic synthetic place-recognition worlds.

Every place has a latent nonnegative prototype map; its images are the
prototype, circularly shifted by a few cells (a crude viewpoint change),
plus Gaussian noise, clamped at zero.  Optionally a fraction of the
channels carry no place information at all: they hold per-image noise
whose strength ``s`` (exponentially distributed) is shared across those
channels.  With ``nuisance_leak > 0`` the same per-image strength also
contaminates each informative channel c by ``s * leak_c * |noise|``, with
``leak_c`` fixed per world, so how much a channel can be trusted depends
on the image.

Places sit on a square grid in UTM coordinates, ``spacing`` meters apart,
and each place draws its randomness from a stream keyed by
``(seed, place index)``, so a place's images do not depend on how many
other places are generated or in which order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation.base import FeatureMap
from .featureio import write_feature
from .sla import GeoRecord, write_records


@dataclass(frozen=True)
class WorldSpec:
    n_places: int = 200
    imgs_per_place: int = 6
    C: int = 32
    H: int = 4
    W: int = 4
    intra_noise: float = 0.1
    inter_separation: float = 1.0
    seed: int = 0
    utm_origin: tuple[float, float] = (500005.0, 4000005.0)
    spacing: float = 50.0
    jitter_m: float = 2.0
    max_shift: int = 0
    nuisance_fraction: float = 0.0
    nuisance_scale: float = 1.0
    nuisance_leak: float = 0.0
    dataset: str = "M"

    def __post_init__(self):
        if self.n_places < 1 or self.imgs_per_place < 1:
            raise ValueError("need at least one place and one image per place")
        if self.intra_noise < 0:
            raise ValueError("intra_noise must be nonnegative")
        if self.jitter_m * 2 >= self.spacing:
            raise ValueError("jitter must stay well inside the place spacing")


@dataclass
class World:
    spec: WorldSpec
    maps: np.ndarray  # [n_images, C, H, W] float32
    records: list[GeoRecord]
    place: np.ndarray  # [n_images] place index
    nuisance_channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def feature_map(self, i: int) -> FeatureMap:
        return FeatureMap(self.maps[i])

    def subset(self, mask) -> "World":
        idx = np.flatnonzero(mask)
        return World(self.spec, self.maps[idx], [self.records[i] for i in idx], self.place[idx], self.nuisance_channels)

    def metadata(self) -> list[dict]:
        return [{"image_id": r.image_id, "east": r.east, "north": r.north} for r in self.records]


def image_id(place: int, img: int) -> str:
    return f"p{place:05d}_i{img:02d}"


def place_position(spec: WorldSpec, place: int) -> tuple[float, float]:
    cols = math.ceil(math.sqrt(spec.n_places))
    e0, n0 = spec.utm_origin
    return e0 + (place % cols) * spec.spacing, n0 + (place // cols) * spec.spacing


def _place_images(spec: WorldSpec, place: int, nuisance: np.ndarray, leak: np.ndarray):
    rng = np.random.default_rng([spec.seed, place])
    proto = np.abs(rng.standard_normal((spec.C, spec.H, spec.W))) * spec.inter_separation
    proto[nuisance] = 0.0
    east, north = place_position(spec, place)
    out = np.empty((spec.imgs_per_place, spec.C, spec.H, spec.W))
    coords = []
    for j in range(spec.imgs_per_place):
        img = proto
        if spec.max_shift:
            dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
            img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
        img = img + spec.intra_noise * rng.standard_normal(img.shape)
        if nuisance.size:
            strength = spec.nuisance_scale * rng.exponential()
            img[nuisance] = strength * np.abs(rng.standard_normal((nuisance.size, spec.H, spec.W)))
            if spec.nuisance_leak:
                img += strength * leak[:, None, None] * np.abs(rng.standard_normal(img.shape))
        out[j] = np.maximum(img, 0.0)
        je, jn = rng.uniform(-spec.jitter_m, spec.jitter_m, size=2)
        coords.append((east + je, north + jn))
    return out, coords


def generate(spec: WorldSpec) -> World:
    n_nuis = int(round(spec.nuisance_fraction * spec.C))
    world_rng = np.random.default_rng([spec.seed, 2**32 - 1])
    nuisance = np.sort(world_rng.permutation(spec.C)[:n_nuis])
    leak = world_rng.uniform(0.0, spec.nuisance_leak, spec.C)
    leak[nuisance] = 0.0
    maps, records, place = [], [], []
    for p in range(spec.n_places):
        imgs, coords = _place_images(spec, p, nuisance, leak)
        maps.append(imgs)
        for j, (e, n) in enumerate(coords):
            records.append(GeoRecord(image_id(p, j), spec.dataset, e, n))
            place.append(p)
    return World(spec, np.concatenate(maps).astype(np.float32), records, np.array(place), nuisance)


def split_places(world: World, n_train: int) -> tuple[World, World]:
    """Places ``[0, n_train)`` for training, the rest for evaluation."""
    return world.subset(world.place < n_train), world.subset(world.place >= n_train)


def query_db_split(world: World, n_db: int) -> tuple[World, World]:
    """Per place, the first ``n_db`` images form the database, the rest the queries."""
    img = np.array([int(r.image_id.rsplit("_i", 1)[1]) for r in world.records])
    return world.subset(img >= n_db), world.subset(img < n_db)


def write_world(world: World, directory) -> Path:
    """Write one feature file per image plus ``records.csv``; returns the directory."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(world.records):
        write_feature(directory / "features" / f"{rec.image_id}.spfm", FeatureMap(world.maps[i]))
    write_records(directory / "records.csv", world.records)
    return directory
