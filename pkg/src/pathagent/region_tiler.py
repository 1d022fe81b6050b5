"""Huge-region tiling plans, tissue filtering and region extraction."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvalidOverlap, OutOfBounds
from .slide_model import REGION_SIZE, RegionImage, SlidePyramid

DEFAULT_OVERLAP = 0.05
DEFAULT_MIN_TISSUE = 0.10
SATURATION_MIN = 0.08
VALUE_MAX = 0.94
PREVIEW_MAX = 512


@dataclass(frozen=True)
class RegionSpec:
    region_id: int
    origin: tuple[int, int]
    size: tuple[int, int]
    tissue_fraction: float | None = None

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (*self.origin, *self.size)


@dataclass(frozen=True)
class TilingPlan:
    slide_id: str
    width_px: int
    height_px: int
    region_size: int
    overlap: float
    stride: int
    specs: tuple[RegionSpec, ...]

    def ids(self) -> list[int]:
        return [s.region_id for s in self.specs]

    def get(self, region_id: int) -> RegionSpec:
        for s in self.specs:
            if s.region_id == region_id:
                return s
        raise KeyError(region_id)


def stride_for(region_size: int, overlap: float) -> int:
    return int(math.floor(region_size * (1 - overlap) + 0.5))


def axis_positions(dim: int, region_size: int, stride: int) -> list[int]:
    """Window starts along one axis; the last one is clamped to ``dim - region_size``."""
    if dim <= region_size:
        return [0]
    n = -(-(dim - region_size) // stride) + 1
    return [i * stride for i in range(n - 1)] + [dim - region_size]


def plan_regions(width_px: int, height_px: int, region_size: int = REGION_SIZE,
                 overlap: float = DEFAULT_OVERLAP, slide_id: str = "") -> TilingPlan:
    if width_px < 1 or height_px < 1:
        raise ValueError("slide dimensions must be >= 1")
    if not 0 <= overlap < 1:
        raise InvalidOverlap(f"overlap must lie in [0, 1), got {overlap}")
    if region_size < 1:
        raise ValueError("region_size must be >= 1")
    stride = stride_for(region_size, overlap)
    if stride < 1:
        raise InvalidOverlap(f"overlap {overlap} leaves a zero stride")
    xs = axis_positions(width_px, region_size, stride)
    ys = axis_positions(height_px, region_size, stride)
    w, h = min(width_px, region_size), min(height_px, region_size)
    specs = tuple(
        RegionSpec(j * len(xs) + i, (x, y), (w, h))
        for j, y in enumerate(ys)
        for i, x in enumerate(xs)
    )
    return TilingPlan(slide_id, width_px, height_px, region_size, overlap, stride, specs)


def tissue_mask(image: np.ndarray, s_min: float = SATURATION_MIN, v_max: float = VALUE_MAX) -> np.ndarray:
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    sat = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    return (sat > s_min) & (mx < v_max)


def tissue_fraction(image: np.ndarray, s_min: float = SATURATION_MIN, v_max: float = VALUE_MAX) -> float:
    """Fraction of pixels with HSV saturation above ``s_min`` and value below ``v_max``."""
    if image.size == 0:
        raise ValueError("empty raster")
    return float(tissue_mask(image, s_min, v_max).mean())


def region_preview(pyramid: SlidePyramid, spec: RegionSpec, max_side: int = PREVIEW_MAX) -> np.ndarray:
    x, y = spec.origin
    w, h = spec.size
    scale = max(w, h) / max_side
    if scale <= 1:
        return pyramid.read_region(x, y, w, h)
    ow, oh = max(1, int(round(w / scale))), max(1, int(round(h / scale)))
    return pyramid.read_scaled(x, y, w, h, ow, oh)


def filter_regions(plan: TilingPlan, pyramid: SlidePyramid, min_tissue: float = DEFAULT_MIN_TISSUE,
                   s_min: float = SATURATION_MIN, v_max: float = VALUE_MAX,
                   workers: int = 1) -> TilingPlan:
    """Keep specs whose preview tissue fraction is strictly above ``min_tissue``.

    Region ids are kept as-is, so the result may have gaps. ``min_tissue <= 0``
    disables the filter: every spec is kept, fractions are still recorded.
    """

    def measure(spec: RegionSpec) -> RegionSpec:
        frac = tissue_fraction(region_preview(pyramid, spec), s_min, v_max)
        return replace(spec, tissue_fraction=frac)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            measured = list(pool.map(measure, plan.specs))
    else:
        measured = [measure(s) for s in plan.specs]
    kept = tuple(s for s in measured if min_tissue <= 0 or s.tissue_fraction > min_tissue)
    return replace(plan, specs=kept)


def extract_region(pyramid: SlidePyramid, spec: RegionSpec) -> RegionImage:
    x, y = spec.origin
    w, h = spec.size
    if x < 0 or y < 0 or x + w > pyramid.width_px or y + h > pyramid.height_px:
        raise OutOfBounds(f"region {spec.region_id} rect {spec.rect} outside slide")
    pixels = pyramid.read_region(x, y, w, h)
    return RegionImage(spec.region_id, pyramid.slide_id, (x, y), (w, h), pixels)


# --------------------------------------------------------------------------
# region manifest JSONL


def spec_to_json(spec: RegionSpec, slide_id: str) -> dict:
    return {
        "region_id": spec.region_id,
        "slide_id": slide_id,
        "x": spec.origin[0],
        "y": spec.origin[1],
        "w": spec.size[0],
        "h": spec.size[1],
        "tissue_fraction": spec.tissue_fraction,
    }


def write_region_manifest(path: str | Path, plan: TilingPlan) -> None:
    lines = [json.dumps(spec_to_json(s, plan.slide_id)) for s in plan.specs]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_region_manifest(path: str | Path) -> list[tuple[str, RegionSpec]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append((d["slide_id"], RegionSpec(int(d["region_id"]), (int(d["x"]), int(d["y"])),
                                              (int(d["w"]), int(d["h"])), d.get("tissue_fraction"))))
    return out


def iter_boxes(plan: TilingPlan, scale: float) -> Iterable[tuple[int, int, int, int]]:
    for s in plan.specs:
        x, y = s.origin
        w, h = s.size
        yield (int(x * scale), int(y * scale), max(1, int(round(w * scale))), max(1, int(round(h * scale))))
