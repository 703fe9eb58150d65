"""Convert heterogeneous geographic supervision into unified place labels.

Four sources are understood:

* ``G`` records carry a native place id which is kept as is.
* ``S`` records are binned by UTM cell and heading.
* ``M`` records are binned by UTM cell only.
* ``P`` records are binned by UTM cell and then split into subclasses by
  matching each training image against the 0/90/180/270 degree panorama
  slices that fall in the same cell.

Cells are spread over ``N*N`` (or ``N*N*L`` with heading) interleaved groups
by modular arithmetic on the cell indices.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

DATASETS = ("G", "P", "M", "S")
PANO_SLICES = (0, 90, 180, 270)


class RecordError(ValueError):
    """A record (or records file) violates the input contract."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"row {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class GeoRecord:
    image_id: str
    dataset: str
    east: float | None = None
    north: float | None = None
    heading: float | None = None
    pano_slice: int | None = None
    place_id: str | None = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise RecordError(f"unknown dataset tag {self.dataset!r} for {self.image_id}")
        if self.dataset == "G":
            if self.place_id is None:
                raise RecordError(f"G record {self.image_id} has no place_id")
        elif self.east is None or self.north is None:
            raise RecordError(f"{self.dataset} record {self.image_id} needs east and north")
        if self.dataset == "S" and self.heading is None:
            raise RecordError(f"S record {self.image_id} has no heading")
        if self.dataset in ("P", "M") and self.heading is not None:
            raise RecordError(f"{self.dataset} record {self.image_id} must not carry a heading")
        if self.pano_slice is not None and self.pano_slice not in PANO_SLICES:
            raise RecordError(f"pano_slice {self.pano_slice} not in {PANO_SLICES}")


@dataclass(frozen=True)
class GridConfig:
    M: float = 10.0
    alpha: float = 30.0
    N: int = 5
    L: int = 2

    def __post_init__(self):
        if self.M <= 0:
            raise ValueError("M must be positive")
        if self.alpha <= 0 or not math.isclose(360.0 / self.alpha, round(360.0 / self.alpha)):
            raise ValueError(f"alpha={self.alpha} must divide 360")
        if self.N < 1 or self.L < 1:
            raise ValueError("N and L must be >= 1")

    @property
    def heading_bins(self) -> int:
        return int(round(360.0 / self.alpha))


class ClassKey(NamedTuple):
    e: int
    n: int
    h: int | None = None


class PlaceLabel(NamedTuple):
    image_id: str
    group: tuple  # (u, v) or (u, v, w)
    class_id: int
    source: str

    @property
    def group_u(self) -> int:
        return self.group[0]

    @property
    def group_v(self) -> int:
        return self.group[1]

    @property
    def group_w(self) -> int | None:
        return self.group[2] if len(self.group) > 2 else None


class MatchScore(NamedTuple):
    query_id: str
    candidate_id: str
    inlier_count: int


class Matcher(Protocol):
    def match(self, query_id: str, candidate_id: str) -> int:
        """Number of geometrically consistent local matches between two images."""
        ...


# -- class and group assignment ---------------------------------------------

def normalize_heading(heading: float) -> float:
    h = math.fmod(heading, 360.0)
    if h < 0:
        h += 360.0
    # fmod of e.g. -1e-18 can round back up to 360
    return 0.0 if h >= 360.0 else h


def assign_class_sfxl(rec: GeoRecord, cfg: GridConfig = GridConfig()) -> ClassKey:
    if rec.heading is None:
        raise RecordError(f"record {rec.image_id} has no heading")
    h = int(normalize_heading(rec.heading) // cfg.alpha)
    return ClassKey(math.floor(rec.east / cfg.M), math.floor(rec.north / cfg.M), min(h, cfg.heading_bins - 1))


def assign_class_grid(rec: GeoRecord, cfg: GridConfig = GridConfig()) -> ClassKey:
    return ClassKey(math.floor(rec.east / cfg.M), math.floor(rec.north / cfg.M))


def assign_group(key: ClassKey, cfg: GridConfig = GridConfig()) -> tuple:
    u, v = key.e % cfg.N, key.n % cfg.N
    if key.h is None:
        return (u, v)
    return (u, v, key.h % cfg.L)


# -- matchers -------------------------------------------------------------------

class MockMatcher:
    """Scores a pair by the dot product of per-image test vectors.

    ``inlier_count = floor(scale * max(0, <v_q, v_c>))``.  Unknown ids raise
    ``KeyError``, which the refinement step treats as a failed pair.
    """

    def __init__(self, vectors: Mapping[str, Sequence[float]], scale: float = 100.0):
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self.scale = scale

    def match(self, query_id: str, candidate_id: str) -> int:
        dot = float(self.vectors[query_id] @ self.vectors[candidate_id])
        return int(math.floor(self.scale * max(0.0, dot)))


class PatchCorrelationMatcher:
    """Brute-force mutual-nearest-neighbour matching of feature-map patches.

    Each spatial position of a [C, H, W] map is a local descriptor; a pair of
    positions counts as an inlier when they are mutual nearest neighbours by
    cosine similarity and that similarity is at least ``min_similarity``.
    """

    def __init__(self, maps: Mapping[str, np.ndarray], min_similarity: float = 0.8):
        self.maps = maps
        self.min_similarity = min_similarity

    def _patches(self, image_id: str) -> np.ndarray:
        fm = np.asarray(getattr(self.maps[image_id], "values", self.maps[image_id]), dtype=np.float64)
        p = fm.reshape(fm.shape[0], -1).T
        return p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)

    def match(self, query_id: str, candidate_id: str) -> int:
        a, b = self._patches(query_id), self._patches(candidate_id)
        s = a @ b.T
        ab = s.argmax(axis=1)
        ba = s.argmax(axis=0)
        mutual = ba[ab] == np.arange(len(a))
        good = s[np.arange(len(a)), ab] >= self.min_similarity
        return int(np.sum(mutual & good))


def _safe_match(matcher: Matcher, q: str, c: str) -> int:
    try:
        return max(0, int(matcher.match(q, c)))
    except Exception as exc:  # a failed pair scores zero
        log.warning("matcher failed on (%s, %s): %s", q, c, exc)
        return 0


def refine_pitts_subclasses(
    cell: Sequence[GeoRecord],
    pano_queries: Sequence[GeoRecord],
    matcher: Matcher,
    min_inliers: int = 20,
) -> dict[str, int]:
    """Subclass index (position in ``pano_queries``) for each image of a cell.

    Each image goes to the query slice with the most inliers, provided that
    count reaches ``min_inliers``; otherwise it is left out of the result.
    Ties go to the earlier query.
    """
    if not cell:
        raise ValueError("empty cell")
    out: dict[str, int] = {}
    if not pano_queries:
        return out
    for rec in cell:
        scores = [_safe_match(matcher, q.image_id, rec.image_id) for q in pano_queries]
        best = int(np.argmax(scores))
        if scores[best] >= min_inliers:
            out[rec.image_id] = best
    return out


# -- unified label space ------------------------------------------------------

def _key_of(rec: GeoRecord, cfg: GridConfig) -> ClassKey:
    return assign_class_sfxl(rec, cfg) if rec.dataset == "S" else assign_class_grid(rec, cfg)


def build_unified_labels(
    records: Sequence[GeoRecord],
    native_g_labels: Mapping[str, str] | None = None,
    cfg: GridConfig = GridConfig(),
    matcher: Matcher | None = None,
    min_inliers: int = 20,
    min_images: int = 2,
    threads: int = 1,
) -> list[PlaceLabel]:
    """Label every record that lands in a usable class.

    Output is sorted by source, group and class id, then by input order;
    it does not depend on ``threads``.  Classes with fewer than
    ``min_images`` members are dropped, as are P images that no panorama
    slice of their cell matches well enough.  Panorama slices themselves are
    members of the subclass they define.
    """
    seen: set[str] = set()
    for rec in records:
        if rec.image_id in seen:
            raise RecordError(f"duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
    native = dict(native_g_labels or {})

    # (source, group, class key) -> member indices, in input order
    members: dict[tuple, list[int]] = defaultdict(list)

    def grid_keys(idx: Sequence[int]):
        return [_key_of(records[i], cfg) for i in idx]

    geo_idx = [i for i, r in enumerate(records) if r.dataset != "G"]
    chunks = [geo_idx[k::threads] for k in range(max(threads, 1))]
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        keyed = list(pool.map(grid_keys, chunks))
    keys: dict[int, ClassKey] = {}
    for idx, ks in zip(chunks, keyed):
        keys.update(zip(idx, ks))

    for i, rec in enumerate(records):
        if rec.dataset == "G":
            pid = native.get(rec.image_id, rec.place_id)
            members[("G", (0, 0), (str(pid),))].append(i)
        elif rec.dataset in ("S", "M"):
            key = keys[i]
            members[(rec.dataset, assign_group(key, cfg), tuple(key))].append(i)

    p_cells: dict[ClassKey, list[int]] = defaultdict(list)
    for i in geo_idx:
        if records[i].dataset == "P":
            p_cells[keys[i]].append(i)
    if p_cells and matcher is None:
        raise ValueError("P records need a matcher for subclass refinement")

    def refine(item):
        key, idx = item
        queries = sorted((records[i] for i in idx if records[i].pano_slice is not None),
                         key=lambda r: (r.pano_slice, r.image_id))
        train = [records[i] for i in idx if records[i].pano_slice is None]
        sub = refine_pitts_subclasses(train, queries, matcher, min_inliers) if train else {}
        for q_idx, q in enumerate(queries):
            sub[q.image_id] = q_idx
        return key, idx, sub, queries

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        refined = list(pool.map(refine, sorted(p_cells.items())))
    for key, idx, sub, queries in refined:
        group = assign_group(key, cfg)
        for i in idx:
            s = sub.get(records[i].image_id)
            if s is not None:
                q = queries[s]
                members[("P", group, tuple(key) + (q.pano_slice, q.image_id))].append(i)

    next_id: dict[tuple, int] = defaultdict(int)
    labels: list[PlaceLabel] = []
    for (source, group, key) in sorted(members, key=_sort_key):
        idx = members[(source, group, key)]
        if len(idx) < min_images:
            continue
        cid = next_id[(source, group)]
        next_id[(source, group)] += 1
        labels.extend(PlaceLabel(records[i].image_id, group, cid, source) for i in sorted(idx))
    return labels


def _sort_key(item):
    # key tuples are homogeneous within a source, so plain tuple order works
    source, group, key = item
    return (DATASETS.index(source), group, key)


def global_class_ids(labels: Iterable[PlaceLabel]) -> dict[str, int]:
    """Dense integer class per image over the whole label set."""
    index: dict[tuple, int] = {}
    out: dict[str, int] = {}
    for lab in labels:
        k = (lab.source, lab.group, lab.class_id)
        out[lab.image_id] = index.setdefault(k, len(index))
    return out


# -- record and label files ----------------------------------------------------

RECORD_FIELDS = ("image_id", "dataset", "east", "north", "heading", "pano_slice", "place_id")
LABEL_FIELDS = ("image_id", "group_u", "group_v", "group_w", "class_id", "source")


def _opt_float(v, field, line):
    if v is None or v == "":
        return None
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise RecordError(f"{field}={v!r} is not a number", line) from None
    if not math.isfinite(x):
        raise RecordError(f"{field} is not finite", line)
    return x


def record_from_dict(d: Mapping, line: int | None = None) -> GeoRecord:
    unknown = set(d) - set(RECORD_FIELDS)
    if unknown:
        raise RecordError(f"unknown fields {sorted(unknown)}", line)
    if not d.get("image_id"):
        raise RecordError("missing image_id", line)
    pano = _opt_float(d.get("pano_slice"), "pano_slice", line)
    place = d.get("place_id")
    try:
        return GeoRecord(
            image_id=str(d["image_id"]),
            dataset=str(d.get("dataset", "")),
            east=_opt_float(d.get("east"), "east", line),
            north=_opt_float(d.get("north"), "north", line),
            heading=_opt_float(d.get("heading"), "heading", line),
            pano_slice=None if pano is None else int(pano),
            place_id=None if place in (None, "") else str(place),
        )
    except RecordError as exc:
        if exc.line is None and line is not None:
            raise RecordError(str(exc), line) from None
        raise


def read_records(path) -> list[GeoRecord]:
    """Records from CSV (header row required) or JSON-lines (``.jsonl``/``.json``)."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        if path.suffix in (".jsonl", ".json", ".ndjson"):
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RecordError(f"invalid JSON ({exc.msg})", n) from None
                if not isinstance(d, dict):
                    raise RecordError("expected a JSON object", n)
                records.append(record_from_dict(d, n))
        else:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "image_id" not in reader.fieldnames:
                raise RecordError("CSV header must include image_id", 1)
            for row in reader:
                n = reader.line_num
                if None in row or any(v is None for v in row.values()):
                    raise RecordError("wrong number of columns", n)
                records.append(record_from_dict(row, n))
    return records


def write_records(path, records: Iterable[GeoRecord]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if path.suffix in (".jsonl", ".json", ".ndjson"):
            for r in records:
                fh.write(json.dumps({f: getattr(r, f) for f in RECORD_FIELDS}) + "\n")
        else:
            w = csv.writer(fh)
            w.writerow(RECORD_FIELDS)
            for r in records:
                w.writerow(["" if getattr(r, f) is None else getattr(r, f) for f in RECORD_FIELDS])


def write_labels(path, labels: Iterable[PlaceLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            row = {"image_id": lab.image_id, "group_u": lab.group_u, "group_v": lab.group_v,
                   "group_w": lab.group_w, "class_id": lab.class_id, "source": lab.source}
            fh.write(json.dumps(row) + "\n")


def read_labels(path) -> list[PlaceLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                group = (int(d["group_u"]), int(d["group_v"]))
                if d.get("group_w") is not None:
                    group += (int(d["group_w"]),)
                out.append(PlaceLabel(str(d["image_id"]), group, int(d["class_id"]), str(d["source"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise RecordError(f"bad label line ({exc})", n) from None
    return out


def class_counts(labels: Iterable[PlaceLabel]) -> dict[str, tuple[int, int]]:
    """Per source: (number of classes, number of labeled images)."""
    classes: dict[str, set] = defaultdict(set)
    images: dict[str, int] = defaultdict(int)
    for lab in labels:
        classes[lab.source].add((lab.group, lab.class_id))
        images[lab.source] += 1
    return {s: (len(classes[s]), images[s]) for s in DATASETS if s in images}
