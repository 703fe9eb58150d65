"""Two-stage training of the NetVLAD + projection head.

Stage 1 trains the backbone tail and NetVLAD on the full C*K descriptor.
Stage 2 freezes all of that and trains only the C x C' projection on the
compact descriptor.  The comparison at the end also trains the one-shot
variant, where the projection is learned jointly from the start.
"""

import numpy as np

from placerec.bench import Protocol, recall1
from placerec.synthbench import generate, split_places
from placerec.training import PlaceModel, TrainConfig, build_model, stage_plan, train_stage1, train_stage2_ft2

p = Protocol()
world = generate(p.world)
train, test = split_places(world, p.n_train)
cfg = TrainConfig(lr=p.lr, epochs_stage1=p.epochs)
print(f"world: {len(world.records)} images of {p.world.n_places} places, "
      f"{len(world.nuisance_channels)} of {p.world.C} channels pure noise")

model = build_model("nvl-ft2", p.world.C, clusters=p.clusters, out_per_cluster=p.out_per_cluster,
                    init_maps=train.maps, rng=0)
print("stage 1 trains:", ", ".join(stage_plan(model, "stage1")))
r1 = train_stage1(model, train.maps, train.place, cfg, p.batch)
print(f"stage 1 loss {r1.epoch_losses[0]:.3f} -> {r1.epoch_losses[-1]:.3f}; "
      f"R@1 of the {model.head.out_dim}-dim descriptor: {recall1(model, test, p.n_db):.1f}")

r2 = train_stage2_ft2(r1.checkpoint, train.maps, train.place, cfg, p.batch)
ft2 = PlaceModel.from_checkpoint(r2.checkpoint)
changed = [k for k in r1.checkpoint.tensors
           if not np.array_equal(r1.checkpoint.tensors[k], r2.checkpoint.tensors[k])]
print(f"stage 2 trained {r2.trainable_count} values; tensors that changed: {changed}")
print(f"R@1 of the {ft2.head.out_dim}-dim projected descriptor: {recall1(ft2, test, p.n_db):.1f}")

one = build_model("nvl", p.world.C, clusters=p.clusters, out_per_cluster=p.out_per_cluster,
                  init_maps=train.maps, rng=0)
train_stage1(one, train.maps, train.place, cfg, p.batch, one_shot=True)
print(f"one-shot variant, same descriptor size: R@1 {recall1(one, test, p.n_db):.1f}")
