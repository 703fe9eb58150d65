"""GeM pooling and the gated G2M head.

GeM sits between average pooling (p = 1) and max pooling (large p).  The
G2M head adds a channel gate computed from a second GeM pooling, so each
image can turn individual channels down before the final projection.
"""

import numpy as np

from placerec.aggregation import FeatureMap, G2mHead, GcaParams, gca_gate, gem_pool, g2m_weight_count

rng = np.random.default_rng(0)
fm = FeatureMap(rng.uniform(0.1, 2.0, (4, 3, 3)))
flat = fm.values.reshape(4, -1)

print("channel means:     ", np.round(flat.mean(1), 4))
for p in (1.0, 3.0, 10.0, 1000.0):
    print(f"GeM p={p:<7g}      ", np.round(gem_pool(fm, p), 4))
print("channel maxima:    ", np.round(flat.max(1), 4))

# A zero-initialized gate outputs sigmoid(0) = 0.5 everywhere.
print("\nzero gate:", gca_gate(fm, GcaParams.init(4, rank=2, zero=True)))
print("random gate:", np.round(gca_gate(fm, GcaParams.init(4, rank=2, rng=1)), 3))

head = G2mHead.create(768, rank=64, rng=0)
d = head(FeatureMap(np.abs(rng.standard_normal((768, 2, 2)))))
print(f"\nG2M at C=768, rank 64: descriptor {d.shape[0]} dims, norm {np.linalg.norm(d):.6f}")
print(f"weights (gate down + up + FC): {g2m_weight_count(768, 64, 768):,}")
