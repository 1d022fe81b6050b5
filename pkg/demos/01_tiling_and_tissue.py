"""Tiling a slide into overlapping huge regions and dropping the empty ones.

Run with ``python demos/01_tiling_and_tissue.py [out_dir]``.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from pathagent import region_tiler, slide_model

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/tiling")
out.mkdir(parents=True, exist_ok=True)

# A real slide is tiled into 16000-px regions at stride 15200. The arithmetic is
# pure, so it can be inspected without any pixels:
plan = region_tiler.plan_regions(31200, 31200)
for spec in plan.specs:
    print(f"region {spec.region_id}: origin={spec.origin} size={spec.size}")

# 31201 px needs a third column; the last window is clamped to the edge and
# overlaps its neighbour almost completely.
print("x starts for 31201:", region_tiler.axis_positions(31201, 16000, 15200))

# %% A small synthetic slide: glass background with two blobs of pink tissue.
h, w = 1200, 2000
yy, xx = np.mgrid[0:h, 0:w]
base = np.full((h, w, 3), 245, np.uint8)
for cx, cy, r in ((450, 400, 300), (1500, 800, 350)):
    base[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] = (200, 120, 180)
pyramid = slide_model.pyramid_from_array(base, "demo-slide", downsamples=(1, 4, 16))
manifest = slide_model.save_pyramid(pyramid, out / "slide")
print("pyramid written to", manifest)

# Scaled down, the same 5% overlap gives 500-px regions at stride 475.
plan = region_tiler.plan_regions(w, h, region_size=500, slide_id="demo-slide")
kept = region_tiler.filter_regions(plan, pyramid, min_tissue=0.10)
print(f"{len(kept.specs)} of {len(plan.specs)} regions hold more than 10% tissue")
for spec in kept.specs:
    print(f"  region {spec.region_id:2d} at {spec.origin}: tissue {spec.tissue_fraction:.2f}")

# Region ids are not renumbered after filtering, so they still index the full grid.
thumb = slide_model.make_thumbnail(pyramid, factor=4)
boxes = list(region_tiler.iter_boxes(kept, 1 / 4))
overlay = slide_model.annotate_boxes(thumb, boxes, [str(s.region_id) for s in kept.specs])
slide_model.write_png(out / "kept_regions.png", overlay)
region_tiler.write_region_manifest(out / "regions.jsonl", kept)
print("overlay and manifest written to", out)
