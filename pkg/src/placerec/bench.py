"""Desk-scale head comparisons on synthetic worlds.

One protocol, shared by the acceptance suite and the demos: generate a
world, train on the first ``n_train`` places, then for the held-out places
use the first ``n_db`` images of each place as the database and the rest
as queries, scored by recall@1 under the 25 m geographic ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

from .retrieval import GroundTruth, build_db, evaluate
from .synthbench import World, WorldSpec, generate, query_db_split, split_places
from .training import BatchSpec, PlaceModel, TrainConfig, build_model, train_stage1, train_stage2_ft2


@dataclass(frozen=True)
class Protocol:
    world: WorldSpec = WorldSpec(intra_noise=0.27, nuisance_fraction=0.5)
    n_train: int = 120
    n_db: int = 3
    epochs: int = 30
    lr: float = 1e-3
    rank: int = 8
    clusters: int = 8
    out_per_cluster: int = 16
    batch: BatchSpec = BatchSpec(16, 4)
    extra: dict[str, Any] = field(default_factory=dict)

    def with_seed(self, seed: int) -> "Protocol":
        return replace(self, world=replace(self.world, seed=seed), batch=replace(self.batch, seed=seed))


def recall1(model: PlaceModel, world: World, n_db: int) -> float:
    queries, db = query_db_split(world, n_db)
    index = build_db(model.describe(db.maps), db.metadata())
    return evaluate(index, model.describe(queries.maps), queries.metadata(), GroundTruth.geo(25.0), (1,)).recall[1]


def run_head(head: str, protocol: Protocol) -> dict[str, float]:
    """Train one head and report held-out R@1.

    ``nvl-ft2`` reports both the stage-1 NetVLAD descriptor (``nv``) and the
    projected descriptor after stage 2 (``nvl-ft2``).  ``nvl`` is the
    one-shot variant: projection and everything else trained jointly for
    ``epochs``; FT2 gets ``epochs`` in stage 1 plus half as many in stage 2.
    """
    world = generate(protocol.world)
    train, test = split_places(world, protocol.n_train)
    seed = protocol.world.seed
    model = build_model(head, protocol.world.C, rank=protocol.rank, clusters=protocol.clusters,
                        out_per_cluster=protocol.out_per_cluster, init_maps=train.maps, rng=seed)
    cfg = TrainConfig(lr=protocol.lr, epochs_stage1=protocol.epochs)
    result = train_stage1(model, train.maps, train.place, cfg, protocol.batch, one_shot=head == "nvl")
    out: dict[str, float] = {}
    if head != "nvl-ft2":
        out[head] = recall1(model, test, protocol.n_db)
        return out
    out["nv"] = recall1(model, test, protocol.n_db)
    r2 = train_stage2_ft2(result.checkpoint, train.maps, train.place, cfg, protocol.batch)
    out["nvl-ft2"] = recall1(PlaceModel.from_checkpoint(r2.checkpoint), test, protocol.n_db)
    return out


def compare(heads, seeds, protocol: Protocol = Protocol()) -> list[dict[str, float]]:
    """One row per seed mapping result name -> R@1."""
    rows = []
    for seed in seeds:
        row: dict[str, float] = {"seed": seed}
        p = protocol.with_seed(seed)
        for head in heads:
            row.update(run_head(head, p))
        rows.append(row)
    return rows
