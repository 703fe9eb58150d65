"""Exact cosine search over a descriptor database and recall@K evaluation."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from . import featureio

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-4
REGIMES = ("geo", "frame", "exact")


@dataclass(frozen=True)
class DescriptorDb:
    vectors: np.ndarray  # [N, D], unit rows
    metadata: tuple[dict[str, Any], ...]

    @property
    def N(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def save(self, path) -> None:
        featureio.write_db(path, self.vectors, list(self.metadata))

    @classmethod
    def load(cls, path) -> "DescriptorDb":
        vectors, meta = featureio.read_db(path)
        return build_db(vectors, meta)


def build_db(descriptors, metadata: Sequence[Mapping[str, Any]] | None = None) -> DescriptorDb:
    """Validate and freeze a database; rows off the unit sphere are renormalized."""
    rows = [np.asarray(d, dtype=np.float64).ravel() for d in descriptors]
    if not rows:
        raise ValueError("cannot build an empty database")
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise ValueError(f"descriptor dimensions differ: {sorted(dims)}")
    v = np.stack(rows)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite descriptor values")
    norms = np.linalg.norm(v, axis=1)
    off = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(norms == 0):
        raise ValueError("zero descriptor cannot be normalized")
    if np.any(off):
        log.warning("normalizing %d database rows that were not unit-norm", int(off.sum()))
        v = v / norms[:, None]
    if metadata is None:
        metadata = [{} for _ in rows]
    if len(metadata) != len(rows):
        raise ValueError(f"{len(metadata)} metadata rows for {len(rows)} descriptors")
    v.setflags(write=False)
    return DescriptorDb(v, tuple(dict(m) for m in metadata))


def _topk(sims: np.ndarray, offset: int, k: int):
    """Top-k of a [Q, n] similarity block: descending, ties by ascending row."""
    k = min(k, sims.shape[1])
    rows = np.arange(sims.shape[1])
    # lexsort: last key is primary
    order = np.lexsort((np.broadcast_to(rows, sims.shape), -sims), axis=1)[:, :k]
    return order + offset, np.take_along_axis(sims, order, axis=1)


def search_many(db: DescriptorDb, queries, k: int, shards: int = 1, threads: int = 1):
    """Exact top-k for a batch of queries; returns (rows [Q, k], sims [Q, k]).

    The database is split into ``shards`` contiguous blocks searched
    independently (on up to ``threads`` workers) and merged, which gives
    the same ranking as one exhaustive scan.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != db.D:
        raise ValueError(f"query dimension {q.shape[1]} != database dimension {db.D}")
    if not 1 <= k <= db.N:
        raise ValueError(f"k={k} must be in [1, {db.N}]")
    bounds = np.linspace(0, db.N, max(1, min(shards, db.N)) + 1).astype(int)

    def scan(i):
        lo, hi = bounds[i], bounds[i + 1]
        # einsum without BLAS: each similarity is summed the same way whatever
        # the shard shape, so duplicate rows tie exactly across partitionings
        return _topk(np.einsum("qd,nd->qn", q, db.vectors[lo:hi]), lo, k)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(scan, range(len(bounds) - 1)))
    rows = np.concatenate([p[0] for p in parts], axis=1)
    sims = np.concatenate([p[1] for p in parts], axis=1)
    order = np.lexsort((rows, -sims), axis=1)[:, :k]
    return np.take_along_axis(rows, order, axis=1), np.take_along_axis(sims, order, axis=1)


def search(db: DescriptorDb, query, k: int) -> list[tuple[int, float]]:
    rows, sims = search_many(db, query, k)
    return [(int(r), float(s)) for r, s in zip(rows[0], sims[0])]


@dataclass(frozen=True)
class GroundTruth:
    regime: str = "geo"
    threshold: float = 25.0  # meters for geo, frames for frame

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime {self.regime!r} not in {REGIMES}")
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")

    @classmethod
    def geo(cls, meters: float = 25.0) -> "GroundTruth":
        return cls("geo", meters)

    @classmethod
    def frame(cls, window: int = 10) -> "GroundTruth":
        return cls("frame", window)

    @classmethod
    def exact(cls) -> "GroundTruth":
        return cls("exact", 0.0)

    def positives(self, query_meta: Mapping[str, Any], db: DescriptorDb) -> np.ndarray:
        """Boolean mask over database rows that count as correct for this query."""
        if self.regime == "geo":
            q = _coords(query_meta, "query")
            d = np.array([_coords(m, f"db row {i}") for i, m in enumerate(db.metadata)])
            return np.hypot(d[:, 0] - q[0], d[:, 1] - q[1]) <= self.threshold
        if self.regime == "frame":
            q = _field(query_meta, "frame", "query")
            d = np.array([_field(m, "frame", f"db row {i}") for i, m in enumerate(db.metadata)])
            return np.abs(d - q) <= self.threshold
        q = _field(query_meta, "match_id", "query")
        return np.array([_field(m, "match_id", f"db row {i}") == q for i, m in enumerate(db.metadata)])


def _field(meta, key, who):
    v = meta.get(key)
    if v is None:
        raise ValueError(f"{who} has no {key!r}, required by this ground-truth regime")
    return v


def _coords(meta, who):
    return float(_field(meta, "east", who)), float(_field(meta, "north", who))


@dataclass
class EvalReport:
    recall: dict[int, float]
    n_queries: int
    regime: str
    threshold: float
    n_excluded: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "recall": {str(k): v for k, v in self.recall.items()},
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
            "regime": self.regime,
            "threshold": self.threshold,
            **self.extra,
        }, sort_keys=True)

    def to_table(self) -> str:
        ks = sorted(self.recall)
        head = "  ".join(f"{'R@' + str(k):>7}" for k in ks)
        vals = "  ".join(f"{self.recall[k]:7.2f}" for k in ks)
        info = f"regime={self.regime} threshold={self.threshold:g} queries={self.n_queries} excluded={self.n_excluded}"
        return f"{head}\n{vals}\n{info}"


def recall_at_k(
    ranked_rows,
    query_meta: Sequence[Mapping[str, Any]],
    db: DescriptorDb,
    gt: GroundTruth = GroundTruth(),
    ks: Sequence[int] = (1, 5, 10),
) -> EvalReport:
    """Percentage of queries with a correct database row in their top K.

    ``ranked_rows[q]`` lists database rows best-first (at least ``max(ks)``
    of them, or all rows).  Queries with no correct row anywhere in the
    database are excluded and counted in ``n_excluded``.
    """
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    if len(ranked_rows) != len(query_meta):
        raise ValueError("one ranking per query is required")
    hits = np.zeros(len(ks))
    used = excluded = 0
    for ranking, meta in zip(ranked_rows, query_meta):
        pos = gt.positives(meta, db)
        if not pos.any():
            excluded += 1
            continue
        used += 1
        ranking = np.asarray(ranking, dtype=int)
        hit = pos[ranking]
        first = int(np.argmax(hit)) if hit.any() else None
        for j, k in enumerate(ks):
            if first is not None and first < k:
                hits[j] += 1
    recall = {k: (100.0 * hits[j] / used if used else 0.0) for j, k in enumerate(ks)}
    return EvalReport(recall, used, gt.regime, gt.threshold, excluded)


def evaluate(db: DescriptorDb, queries, query_meta, gt: GroundTruth = GroundTruth(), ks=(1, 5, 10),
             shards: int = 1, threads: int = 1) -> EvalReport:
    """Search every query and compute recall@K in one call."""
    k = min(max(ks), db.N)
    rows, _ = search_many(db, queries, k, shards=shards, threads=threads)
    return recall_at_k(rows, query_meta, db, gt, ks)
