"""Reducing NetVLAD descriptors with PCA.

The usual alternative to a learned projection: fit principal directions on
database descriptors, project, renormalize.  PCA needs more samples than
output dimensions, so this demo reduces 49,152-dim NetVLAD vectors to 256.
"""

import numpy as np

from placerec.aggregation import NetVladHead, pca_apply, pca_fit

rng = np.random.default_rng(0)
X = rng.standard_normal((200, 8)) @ rng.standard_normal((8, 64))
model = pca_fit(X, 8)
print(f"8-dim data in 64 dims, 8 components: max reconstruction error {np.abs(model.reconstruct(X) - X).max():.1e}")
print("explained variance:", np.round(model.explained_variance, 2))

tokens = np.abs(rng.standard_normal((400, 768, 4)))
nv, _ = NetVladHead.create(768, 64, rng=0).forward(tokens)
pca = pca_fit(nv[:300], 256)
reduced = pca_apply(pca, nv[300:])
print(f"\nNetVLAD {nv.shape[1]} -> {reduced.shape[1]} dims on held-out rows; "
      f"norms in [{np.linalg.norm(reduced, axis=1).min():.6f}, {np.linalg.norm(reduced, axis=1).max():.6f}]")
