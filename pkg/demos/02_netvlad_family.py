"""NetVLAD and its linear-projection variants.

Plain NetVLAD keeps a C-dim residual per cluster (C*K dims).  The NVL
variant projects every intra-normalized residual through one shared
C x C' matrix, and NVL+CLS appends a projected global token.
"""

import numpy as np

from placerec.aggregation import FeatureMap, NetVladHead, NvlHead

rng = np.random.default_rng(0)
fm = FeatureMap(np.abs(rng.standard_normal((768, 4, 4))), cls=rng.standard_normal(768))

nv = NetVladHead.create(768, 64, rng=0)
nvl = NvlHead.create(768, 64, 128, rng=0)
nvl_cls = NvlHead.create(768, 64, 128, with_cls=True, rng=0)

for name, head in [("NetVLAD", nv), ("NVL", nvl), ("NVL+CLS", nvl_cls)]:
    d = head(fm)
    print(f"{name:8s} out {d.shape[0]:6d}  norm {np.linalg.norm(d):.6f}  params {head.n_params():,}")

proj = nvl.params["proj.w"].size
print(f"\nshared projection: {proj:,} weights ({proj / 2**20:.3f} binary millions)")

# Shuffling spatial positions leaves every variant unchanged.
perm = rng.permutation(16)
shuffled = FeatureMap(fm.values.reshape(768, 16)[:, perm].reshape(768, 4, 4), cls=fm.cls)
print("max change under spatial shuffle:", float(np.abs(nvl_cls(shuffled) - nvl_cls(fm)).max()))
