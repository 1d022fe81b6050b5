"""Slide pyramids, huge-region rasters and normalized viewports.

Rasters are ``uint8`` numpy arrays of shape ``(H, W, 3)``. Every function here
is pure: inputs are never mutated, outputs are fresh arrays.

Resampling is fixed so golden images stay bit-stable: area-average (Pillow
``BOX``) when shrinking an axis, bilinear when enlarging it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import _font
from .errors import (
    DimensionMismatch,
    InvalidMagnification,
    InvalidViewport,
    MissingLevel,
    OutOfBounds,
    UnreadableRaster,
)

# A 16000x16000 region is 256 Mpx, far past Pillow's decompression-bomb guard.
Image.MAX_IMAGE_PIXELS = None

DEFAULT_OUT_RES = 1008
REGION_SIZE = 16000
THUMBNAIL_FACTOR = 32


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# --------------------------------------------------------------------------
# resampling


def _axis_filter(src: int, dst: int) -> int:
    return Image.Resampling.BOX if dst < src else Image.Resampling.BILINEAR


def resample(pixels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize an RGB raster to ``(out_h, out_w)`` with the fixed kernels."""
    h, w = pixels.shape[:2]
    if (w, h) == (out_w, out_h):
        return np.array(pixels, dtype=np.uint8, copy=True)
    img = Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB")
    fx, fy = _axis_filter(w, out_w), _axis_filter(h, out_h)
    if fx == fy or w == out_w or h == out_h:
        f = fx if w != out_w else fy
        img = img.resize((out_w, out_h), resample=f)
    else:
        img = img.resize((out_w, h), resample=fx).resize((out_w, out_h), resample=fy)
    return np.asarray(img, dtype=np.uint8).copy()


def read_raster(path: str | Path, box: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Read an 8-bit RGB PNG/TIFF, optionally cropped to ``(x0, y0, x1, y1)``."""
    try:
        with Image.open(path) as img:
            if box is not None:
                img = img.crop(box)
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types for corrupt files
        raise UnreadableRaster(f"{path}: {exc}") from exc


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG")


# --------------------------------------------------------------------------
# pyramid


@dataclass(frozen=True)
class PyramidLevel:
    """One pyramid level, backed by a file or by an in-memory array."""

    downsample: float
    width: int
    height: int
    path: Path | None = None
    array: np.ndarray | None = field(default=None, repr=False, compare=False)

    def read(self, box: tuple[int, int, int, int] | None = None) -> np.ndarray:
        if self.array is not None:
            if box is None:
                return np.array(self.array, copy=True)
            x0, y0, x1, y1 = box
            return np.array(self.array[y0:y1, x0:x1], copy=True)
        if self.path is None:
            raise MissingLevel(f"level {self.downsample} has no raster")
        try:
            return read_raster(self.path, box)
        except FileNotFoundError as exc:
            raise MissingLevel(str(exc)) from exc


@dataclass(frozen=True)
class SlidePyramid:
    slide_id: str
    width_px: int
    height_px: int
    levels: tuple[PyramidLevel, ...]
    mpp: float | None = None

    def __post_init__(self):
        _check_levels(self.width_px, self.height_px, self.levels)

    def best_level(self, downsample: float) -> int:
        """Index of the coarsest level whose downsample does not exceed ``downsample``."""
        best = 0
        for i, lvl in enumerate(self.levels):
            if lvl.downsample <= downsample + 1e-9:
                best = i
        return best

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Base-level pixels of the rectangle ``[x, x+w) x [y, y+h)``."""
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > self.width_px or y + h > self.height_px:
            raise OutOfBounds(
                f"rect ({x},{y},{w},{h}) outside slide {self.width_px}x{self.height_px}"
            )
        return self.levels[0].read((x, y, x + w, y + h))

    def read_scaled(self, x: int, y: int, w: int, h: int, out_w: int, out_h: int) -> np.ndarray:
        """Rectangle in base coordinates resampled to ``(out_h, out_w)`` from the closest level."""
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > self.width_px or y + h > self.height_px:
            raise OutOfBounds(f"rect ({x},{y},{w},{h}) outside slide")
        factor = min(w / out_w, h / out_h)
        lvl = self.levels[self.best_level(factor)]
        ds = lvl.downsample
        x0 = min(int(math.floor(x / ds)), lvl.width - 1)
        y0 = min(int(math.floor(y / ds)), lvl.height - 1)
        x1 = max(min(int(math.ceil((x + w) / ds)), lvl.width), x0 + 1)
        y1 = max(min(int(math.ceil((y + h) / ds)), lvl.height), y0 + 1)
        return resample(lvl.read((x0, y0, x1, y1)), out_w, out_h)


def _expected_dim(base: int, downsample: float) -> int:
    return int(math.ceil(base / downsample))


def _check_levels(width: int, height: int, levels: Sequence[PyramidLevel]) -> None:
    if not levels:
        raise MissingLevel("pyramid has no levels")
    if levels[0].downsample != 1:
        raise MissingLevel(f"first level must have downsample 1, got {levels[0].downsample}")
    prev = 0.0
    for lvl in levels:
        if lvl.downsample < 1 or lvl.downsample <= prev:
            raise DimensionMismatch("levels must have strictly ascending downsamples >= 1")
        prev = lvl.downsample
        ew, eh = _expected_dim(width, lvl.downsample), _expected_dim(height, lvl.downsample)
        if abs(lvl.width - ew) > 1 or abs(lvl.height - eh) > 1:
            raise DimensionMismatch(
                f"level downsample {lvl.downsample}: got {lvl.width}x{lvl.height}, "
                f"expected {ew}x{eh} (+-1)"
            )


def load_pyramid(manifest_path: str | Path) -> SlidePyramid:
    """Load a ``slide.json`` manifest; level rasters are opened lazily (header only)."""
    manifest_path = Path(manifest_path)
    try:
        meta = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise MissingLevel(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise UnreadableRaster(f"manifest is not JSON: {exc}") from exc
    levels = []
    for entry in sorted(meta.get("levels", []), key=lambda e: float(e["downsample"])):
        path = manifest_path.parent / entry["path"]
        if not path.exists():
            raise MissingLevel(f"level raster missing: {path}")
        try:
            with Image.open(path) as img:
                w, h = img.size
        except Exception as exc:
            raise UnreadableRaster(f"{path}: {exc}") from exc
        levels.append(PyramidLevel(float(entry["downsample"]), w, h, path=path))
    return SlidePyramid(
        slide_id=str(meta["slide_id"]),
        width_px=int(meta["width_px"]),
        height_px=int(meta["height_px"]),
        levels=tuple(levels),
        mpp=meta.get("mpp"),
    )


def pyramid_from_array(
    pixels: np.ndarray,
    slide_id: str = "slide",
    downsamples: Sequence[int] = (1,),
    mpp: float | None = None,
) -> SlidePyramid:
    """In-memory pyramid; coarser levels are area-averaged from the base raster."""
    h, w = pixels.shape[:2]
    levels = []
    for d in downsamples:
        if d == 1:
            arr = pixels
        else:
            arr = resample(pixels, _expected_dim(w, d), _expected_dim(h, d))
        levels.append(PyramidLevel(float(d), arr.shape[1], arr.shape[0], array=arr))
    return SlidePyramid(slide_id, w, h, tuple(levels), mpp)


def save_pyramid(pyramid: SlidePyramid, directory: str | Path) -> Path:
    """Write every level as PNG plus ``slide.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for lvl in pyramid.levels:
        name = f"level_{int(lvl.downsample) if lvl.downsample.is_integer() else lvl.downsample}.png"
        write_png(directory / name, lvl.read())
        entries.append({"downsample": lvl.downsample, "path": name})
    manifest = {
        "slide_id": pyramid.slide_id,
        "width_px": pyramid.width_px,
        "height_px": pyramid.height_px,
        "mpp": pyramid.mpp,
        "levels": entries,
    }
    path = directory / "slide.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def thumbnail_size(width: int, height: int, factor: int = THUMBNAIL_FACTOR) -> tuple[int, int]:
    return _expected_dim(width, factor), _expected_dim(height, factor)


def make_thumbnail(pyramid: SlidePyramid, factor: int = THUMBNAIL_FACTOR) -> np.ndarray:
    """Slide downscaled by ``factor``, area-averaged from the closest coarser-or-equal level."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    tw, th = thumbnail_size(pyramid.width_px, pyramid.height_px, factor)
    lvl = pyramid.levels[pyramid.best_level(factor)]
    return resample(lvl.read(), tw, th)


# --------------------------------------------------------------------------
# regions and viewports


@dataclass(frozen=True)
class RegionImage:
    region_id: int
    slide_id: str
    origin: tuple[int, int]
    size: tuple[int, int]
    pixels: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_array(cls, pixels: np.ndarray, region_id: int = 0, slide_id: str = "slide",
                   origin: tuple[int, int] = (0, 0)) -> "RegionImage":
        h, w = pixels.shape[:2]
        return cls(region_id, slide_id, origin, (w, h), pixels)


def load_region(path: str | Path) -> RegionImage:
    """Read a bare region PNG/TIFF; a sidecar ``<stem>.json`` supplies provenance."""
    path = Path(path)
    if not path.exists():
        raise UnreadableRaster(f"region raster missing: {path}")
    pixels = read_raster(path)
    h, w = pixels.shape[:2]
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    size = tuple(meta.get("size", (w, h)))
    if size != (w, h):
        raise DimensionMismatch(f"sidecar size {size} disagrees with raster {w}x{h}")
    return RegionImage(
        region_id=int(meta.get("region_id", 0)),
        slide_id=str(meta.get("slide_id", path.stem)),
        origin=tuple(meta.get("origin", (0, 0))),
        size=(w, h),
        pixels=pixels,
    )


def save_region(region: RegionImage, path: str | Path) -> None:
    path = Path(path)
    write_png(path, region.pixels)
    sidecar = {
        "region_id": region.region_id,
        "slide_id": region.slide_id,
        "origin": list(region.origin),
        "size": list(region.size),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar))


@dataclass(frozen=True)
class Viewport:
    """Window centred at ``(cx, cy)`` in region-relative units, side ``1/magnification``."""

    cx: float
    cy: float
    magnification: float = 1.0

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)


@dataclass(frozen=True)
class Window:
    x0: float
    y0: float
    x1: float
    y1: float
    clamped: bool = False

    @property
    def side(self) -> float:
        return self.x1 - self.x0

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)


def _clamp_axis(c: float, s: float) -> tuple[float, float, bool]:
    lo = c - s / 2
    if lo < 0:
        return 0.0, s, True
    if lo > 1.0 - s:
        return 1.0 - s, 1.0, True
    return lo, lo + s, False


def viewport_window(v: Viewport) -> Window:
    """Region-relative window of ``v``, slid inward when it would leave ``[0, 1]^2``."""
    m = float(v.magnification)
    if not math.isfinite(m) or m < 1:
        raise InvalidMagnification(f"magnification must be >= 1, got {v.magnification}")
    if not (math.isfinite(v.cx) and math.isfinite(v.cy)):
        raise InvalidViewport(f"non-finite center ({v.cx}, {v.cy})")
    s = 1.0 / m
    x0, x1, cx_clamped = _clamp_axis(float(v.cx), s)
    y0, y1, cy_clamped = _clamp_axis(float(v.cy), s)
    return Window(x0, y0, x1, y1, clamped=cx_clamped or cy_clamped)


def window_pixels(win: Window, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer ``(x, y, w, h)`` rectangle of ``win`` on a ``width x height`` raster."""

    def axis(lo: float, hi: float, dim: int) -> tuple[int, int]:
        a = min(max(round_half_up(lo * dim), 0), dim - 1)
        b = min(max(round_half_up(hi * dim), a + 1), dim)
        return a, b - a

    x, w = axis(win.x0, win.x1, width)
    y, h = axis(win.y0, win.y1, height)
    return x, y, w, h


@dataclass(frozen=True)
class ViewImage:
    viewport: Viewport  # effective viewport after clamping
    pixels: np.ndarray = field(repr=False, compare=False)
    provenance: tuple[int, int, int, int]  # (x, y, w, h) in region pixels
    requested: Viewport | None = None
    clamped: bool = False  # window slid inward to stay inside the region
    capped: bool = False  # magnification lowered to the executor's cap
    step_index: int | None = None

    def record(self) -> dict:
        v = self.viewport
        rec = {
            "step": self.step_index,
            "provenance": list(self.provenance),
            "center": [v.cx, v.cy],
            "magnification": v.magnification,
            "clamped": self.clamped,
            "capped": self.capped,
        }
        if self.requested is not None:
            r = self.requested
            rec["requested"] = {"center": [r.cx, r.cy], "magnification": r.magnification}
        return rec


def _region_pixels(region: RegionImage | np.ndarray) -> np.ndarray:
    pixels = region.pixels if isinstance(region, RegionImage) else region
    if pixels.size == 0:
        raise ValueError("region is empty")
    return pixels


def crop_viewport(region: RegionImage | np.ndarray, v: Viewport,
                  out_res: int = DEFAULT_OUT_RES) -> ViewImage:
    pixels = _region_pixels(region)
    h, w = pixels.shape[:2]
    win = viewport_window(v)
    x, y, cw, ch = window_pixels(win, w, h)
    out = resample(pixels[y : y + ch, x : x + cw], out_res, out_res)
    cx, cy = win.center
    return ViewImage(
        viewport=Viewport(cx, cy, float(v.magnification)),
        pixels=out,
        provenance=(x, y, cw, ch),
        requested=v,
        clamped=win.clamped,
    )


def multiscale_viewports() -> list[Viewport]:
    """The fixed 1 + 4 + 16 decomposition at 1x, 2x and 4x, row-major per scale."""
    views = [Viewport(0.5, 0.5, 1.0)]
    for m, n in ((2.0, 2), (4.0, 4)):
        step = 1.0 / n
        for j in range(n):
            for i in range(n):
                views.append(Viewport(step / 2 + step * i, step / 2 + step * j, m))
    return views


def multiscale_grid(region: RegionImage | np.ndarray, out_res: int = DEFAULT_OUT_RES) -> list[ViewImage]:
    return [crop_viewport(region, v, out_res) for v in multiscale_viewports()]


# --------------------------------------------------------------------------
# overlays

GRID_COLOR = (0, 0, 0)


def line_width(dim: int) -> int:
    return max(1, round_half_up(dim / 500))


def grid_positions(dim: int, interval: float) -> list[int]:
    """Pixel positions of grid lines on an axis of length ``dim``, far edge included."""
    n = int(math.floor(1.0 / interval + 1e-9))
    pos = {min(round_half_up(k * interval * dim), dim - 1) for k in range(n + 1)}
    pos.add(dim - 1)
    return sorted(pos)


def _label(value: float) -> str:
    text = f"{value:.3f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


def _span(p: int, lw: int, dim: int) -> slice:
    start = p if p + lw <= dim else max(dim - lw, 0)
    return slice(start, start + lw)


def annotate_grid(image: np.ndarray, interval: float = 0.1,
                  color: tuple[int, int, int] = GRID_COLOR) -> np.ndarray:
    """Copy of ``image`` with relative-coordinate grid lines and tick labels."""
    if not 0 < interval < 1:
        raise ValueError("interval must lie in (0, 1)")
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    lw = line_width(max(h, w))
    xs, ys = grid_positions(w, interval), grid_positions(h, interval)
    for x in xs:
        out[:, _span(x, lw, w)] = color
    for y in ys:
        out[_span(y, lw, h), :] = color
    n = int(math.floor(1.0 / interval + 1e-9))
    for k in range(1, n + 1):
        value = k * interval
        if value >= 1.0 - 1e-9:
            break
        text = _label(value)
        px = min(round_half_up(value * w), w - 1)
        py = min(round_half_up(value * h), h - 1)
        _font.stamp(out, text, px + lw + 1, lw + 1, lw, color)
        _font.stamp(out, text, lw + 1, py + lw + 1, lw, color)
    return out


def annotate_boxes(image: np.ndarray, boxes: Sequence[tuple[int, int, int, int]],
                   labels: Sequence[str], color: tuple[int, int, int] = GRID_COLOR) -> np.ndarray:
    """Copy of ``image`` with rectangle outlines ``(x, y, w, h)`` and an id label in each."""
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    lw = line_width(max(h, w))
    for (bx, by, bw, bh), text in zip(boxes, labels):
        x0, y0 = min(max(bx, 0), w - 1), min(max(by, 0), h - 1)
        x1, y1 = min(bx + bw, w), min(by + bh, h)
        out[y0:y1, x0 : min(x0 + lw, x1)] = color
        out[y0:y1, max(x1 - lw, x0) : x1] = color
        out[y0 : min(y0 + lw, y1), x0:x1] = color
        out[max(y1 - lw, y0) : y1, x0:x1] = color
        _font.stamp(out, text, x0 + 2 * lw + 1, y0 + 2 * lw + 1, lw, color)
    return out
