"""Exact search and recall@K under three ground-truth rules.

Geographic: a database image is correct within 25 m.  Frame: within
+-10 frames of a sequence.  Exact: the same match id.  Queries with no
correct image anywhere are left out of the percentage and counted.
"""

import numpy as np

from placerec.retrieval import GroundTruth, build_db, evaluate, search, search_many

db = build_db([[1, 0], [0, 1], [1, 0]])
print("ties go to the lower row:", search(db, [1.0, 0.0], 3))

rng = np.random.default_rng(0)
n = 50
places = rng.standard_normal((n, 16))
db_vecs = places + 0.9 * rng.standard_normal((n, 16))
q_vecs = places + 0.9 * rng.standard_normal((n, 16))
meta = [{"image_id": f"d{i}", "east": 100.0 * i, "north": 0.0, "frame": 50 * i, "match_id": f"m{i}"}
        for i in range(n)]
q_meta = [{"east": 100.0 * i + 12.0, "north": 0.0, "frame": 50 * i + 4, "match_id": f"m{i}"} for i in range(n)]
q_meta[-1] = {"east": -1e6, "north": 0.0, "frame": -999, "match_id": "none"}  # nothing to find
db = build_db(db_vecs / np.linalg.norm(db_vecs, axis=1, keepdims=True), meta)

for gt in (GroundTruth.geo(25), GroundTruth.frame(10), GroundTruth.exact()):
    print()
    print(evaluate(db, q_vecs, q_meta, gt).to_table())

a = search_many(db, q_vecs, 10)
b = search_many(db, q_vecs, 10, shards=7, threads=4)
print("\nsharded search identical to one scan:", np.array_equal(a[0], b[0]))
