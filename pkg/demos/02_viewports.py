"""Viewports, the 21-view multiscale grid and the coordinate-grid overlay."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from pathagent import slide_model
from pathagent.slide_model import Viewport

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/viewports")
out.mkdir(parents=True, exist_ok=True)

# A viewport is a centre in region-relative coordinates plus a magnification.
# Magnification m shows a square window of side 1/m; windows that would leave the
# region are slid inward instead of padded.
for v in (Viewport(0.5, 0.5, 1), Viewport(0.5, 0.5, 4), Viewport(0.05, 0.5, 4)):
    win = slide_model.viewport_window(v)
    print(f"{v} -> x [{win.x0:.3f}, {win.x1:.3f}] y [{win.y0:.3f}, {win.y1:.3f}] clamped={win.clamped}")

# %% A 2048 px region with some structure to look at.
rng = np.random.default_rng(0)
n = 2048
y, x = np.mgrid[0:n, 0:n] / n
field = 140 + 60 * np.sin(12 * x) * np.cos(9 * y) + rng.normal(0, 6, (n, n))
region = np.stack([field, field * 0.7, field * 0.9], axis=-1).clip(0, 255).astype(np.uint8)

views = slide_model.multiscale_grid(region, out_res=512)
print(f"{len(views)} views: 1 at 1x, 4 at 2x, 16 at 4x")
for k, view in enumerate(views[:6]):
    print(f"  view {k}: magnification {view.viewport.magnification:g}, source rect {view.provenance}")
    slide_model.write_png(out / f"grid_{k:02d}.png", view.pixels)

# Every output is out_res square. Box filtering shrinks, bilinear enlarges.
tiny = slide_model.crop_viewport(region, Viewport(0.5, 0.5, 1000), out_res=512)
print("1000x crop reads", tiny.provenance[2:], "px and is enlarged to", tiny.pixels.shape[:2])

# The planner sees the overview with grid lines every 0.1 and tick labels.
overview = slide_model.annotate_grid(views[0].pixels)
slide_model.write_png(out / "overview_grid.png", overview)
print("wrote", out / "overview_grid.png")
