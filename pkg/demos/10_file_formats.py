"""The three binary formats: feature maps, checkpoints, descriptor databases.

All are little-endian with a four-byte magic.  Readers reject a wrong magic,
an unknown version, a short file and trailing bytes, each with its own error.
"""

import tempfile
from pathlib import Path

import numpy as np

from placerec.aggregation import FeatureMap
from placerec.featureio import (
    Checkpoint, FormatError, ToyBackbone, read_checkpoint, read_db, read_feature, toy_forward, write_checkpoint,
    write_db, write_feature,
)

tmp = Path(tempfile.mkdtemp())
backbone = ToyBackbone.create(rng=0)
fm = toy_forward(np.random.default_rng(0).standard_normal((3, 28, 28)), backbone)
print(f"toy backbone: 3x28x28 image -> {fm.values.shape} map, min {fm.values.min():.3f}")

write_feature(tmp / "img.spfm", fm)
back = read_feature(tmp / "img.spfm")
print("feature file:", (tmp / "img.spfm").stat().st_size, "bytes, exact:",
      np.array_equal(back.values, fm.values.astype(np.float32)))

write_checkpoint(tmp / "m.spck", Checkpoint("stage1", backbone.params, {"note": "demo"}))
ck = read_checkpoint(tmp / "m.spck")
print(f"checkpoint: stage {ck.stage}, {len(ck.tensors)} tensors, meta {ck.meta}")

write_db(tmp / "db.spdb", np.eye(3), [{"image_id": f"i{k}", "east": 1.0 * k, "north": 0.0} for k in range(3)])
vecs, meta = read_db(tmp / "db.spdb")
print("database:", vecs.shape, meta[1])

data = bytearray((tmp / "img.spfm").read_bytes())
data[4] = 7  # version
(tmp / "bad.spfm").write_bytes(bytes(data))
try:
    read_feature(tmp / "bad.spfm")
except FormatError as exc:
    print(f"{type(exc).__name__}: {exc}")
