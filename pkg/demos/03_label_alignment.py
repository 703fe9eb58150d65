"""Turning mixed geographic supervision into one set of class labels.

Four kinds of records meet here: heading-tagged street views (S), plain
UTM-tagged images (M), panorama slices (P) and records that already carry
a place id (G).  Positions are bucketed into M-meter cells, headings into
alpha-degree bins, and cells into N x N (x L) groups so that no two classes
of one group are adjacent.
"""

import numpy as np

from placerec.sla import (
    GeoRecord, GridConfig, MockMatcher, assign_class_grid, assign_class_sfxl, assign_group, build_unified_labels,
    class_counts,
)

cfg = GridConfig()
s = GeoRecord("s1", "S", 585750.3, 4477123.9, heading=47)
key = assign_class_sfxl(s, cfg)
print(f"S record at {s.east}, {s.north}, heading 47 -> cell {key}, group {assign_group(key, cfg)}")
m = GeoRecord("m1", "M", 301234.5, 5009876.5)
print(f"M record -> cell {assign_class_grid(m, cfg)}, group {assign_group(assign_class_grid(m, cfg), cfg)}")

rng = np.random.default_rng(0)
records = []
for i in range(6):
    records.append(GeoRecord(f"s{i}", "S", 500003 + i % 2, 4000003, heading=10.0 + i))
    records.append(GeoRecord(f"m{i}", "M", 500103 + i % 3, 4000103))
    records.append(GeoRecord(f"g{i}", "G", place_id=f"place{i // 3}"))
# one panorama cell: four slices plus six ordinary images
for sl in (0, 90, 180, 270):
    records.append(GeoRecord(f"pano{sl}", "P", 500203, 4000203, pano_slice=sl))
for i in range(6):
    records.append(GeoRecord(f"p{i}", "P", 500204, 4000204))

# The mock matcher scores pairs by a dot product of per-image vectors;
# image p{i} points at slice i % 4.
vecs = {f"pano{sl}": np.eye(4)[j] for j, sl in enumerate((0, 90, 180, 270))}
vecs.update({f"p{i}": np.eye(4)[i % 4] for i in range(6)})
labels = build_unified_labels(records, matcher=MockMatcher(vecs, scale=100), cfg=cfg)

print(f"\n{'image':8s} {'source':6s} {'group':10s} class")
for lab in labels:
    print(f"{lab.image_id:8s} {lab.source:6s} {str(lab.group):10s} {lab.class_id}")
print("\nper source (classes, images):", class_counts(labels))
