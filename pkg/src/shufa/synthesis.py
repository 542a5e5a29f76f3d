"""Synthetic glyph corpus generation.

Real calligraphy corpora are not redistributable, so the toolkit manufactures
one: a shared inventory of stroke-based pseudo-glyphs ("characters") plus one
fixed style per writer. A writer's style is a morphological stroke-thickness
delta, a shear angle, an elastic-jitter amplitude and an ink intensity, layered
on top of a transform family shared by all writers of the same script category.
Category families are tuned so that running and cursive analogs sit closest
together, which is the confusion the category classifier should exhibit.

All randomness is derived from (seed, writer index, char index), so generation
order never changes the output and per-image work can run in parallel.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from shufa.corpus import CATEGORIES, DatasetManifest, GlyphRecord
from shufa.seeding import derive_rng

# Per-category base transform: (shear degrees, elastic amplitude px,
# thickness delta px, vertical scale). Running/cursive differ only in degree.
_CATEGORY_BASE = {
    "regular": (0.0, 0.0, 0, 1.00),
    "official": (0.0, 0.0, 1, 0.70),
    "seal": (0.0, 0.0, -1, 1.20),
    "running": (12.0, 1.5, 0, 1.00),
    "cursive": (16.0, 3.5, 0, 1.00),
}


@dataclass
class SynthesisConfig:
    n_writers: int = 30
    chars_per_writer: int = 100
    image_size: int = 96
    seed: int = 0
    # Per-writer style deltas are drawn uniformly from these ranges.
    thickness_range: tuple[int, int] = (-1, 1)
    shear_range: tuple[float, float] = (-6.0, 6.0)
    elastic_range: tuple[float, float] = (0.0, 2.0)
    ink_range: tuple[float, float] = (0.75, 1.0)
    category_rule: str = "round_robin"

    def validate(self) -> None:
        if self.n_writers < 2:
            raise ValueError("n_writers must be >= 2")
        if self.chars_per_writer < 2:
            raise ValueError("chars_per_writer must be >= 2")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.category_rule != "round_robin":
            raise ValueError(f"unknown category_rule {self.category_rule!r}")


@dataclass(frozen=True)
class WriterStyle:
    thickness: int
    shear_deg: float
    elastic_amp: float
    ink: float
    category: str


def writer_style(cfg: SynthesisConfig, writer_index: int) -> WriterStyle:
    """Fixed style parameters for one writer, category base plus writer delta."""
    rng = derive_rng(cfg.seed, "writer", writer_index)
    category = CATEGORIES[writer_index % len(CATEGORIES)]
    base_shear, base_elastic, base_thick, _ = _CATEGORY_BASE[category]
    lo, hi = cfg.thickness_range
    thickness = int(np.clip(base_thick + rng.integers(lo, hi + 1), -1, 2))
    shear = base_shear + rng.uniform(*cfg.shear_range)
    elastic = base_elastic + rng.uniform(*cfg.elastic_range)
    ink = rng.uniform(*cfg.ink_range)
    return WriterStyle(
        thickness=thickness,
        shear_deg=float(shear),
        elastic_amp=float(elastic),
        ink=float(ink),
        category=category,
    )


def base_glyphs(n_chars: int, size: int, seed: int) -> list[np.ndarray]:
    """Stroke-based pseudo-glyphs shared by all writers.

    Each glyph is a few thick line/arc strokes on an otherwise empty canvas,
    returned as float arrays in [0, 1] with ink = 1.
    """
    glyphs = []
    for c in range(n_chars):
        rng = derive_rng(seed, "glyph", c)
        img = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(img)
        lo, hi = int(0.14 * size), int(0.86 * size)
        width = max(2, round(0.05 * size))
        for _ in range(int(rng.integers(3, 7))):
            kind = rng.integers(3)
            if kind == 0:  # straight stroke
                x0, y0, x1, y1 = rng.integers(lo, hi, size=4)
                draw.line([(int(x0), int(y0)), (int(x1), int(y1))], fill=255, width=width)
            elif kind == 1:  # bent stroke
                pts = [(int(x), int(y)) for x, y in rng.integers(lo, hi, size=(3, 2))]
                draw.line(pts, fill=255, width=width, joint="curve")
            else:  # arc
                x0, y0 = rng.integers(lo, (lo + hi) // 2, size=2)
                x1 = int(x0 + rng.integers(size // 5, hi - x0 + 1))
                y1 = int(y0 + rng.integers(size // 5, hi - y0 + 1))
                start = float(rng.uniform(0, 360))
                extent = float(rng.uniform(90, 300))
                draw.arc([int(x0), int(y0), x1, y1], start, start + extent, fill=255, width=width)
        arr = np.asarray(img, dtype=np.float64) / 255.0
        arr = ndimage.gaussian_filter(arr, sigma=0.02 * size)
        glyphs.append(np.clip(arr, 0.0, 1.0))
    return glyphs


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    return (x * x + y * y) <= r * r


def _adjust_thickness(ink: np.ndarray, delta: int) -> np.ndarray:
    if delta > 0:
        return ndimage.grey_dilation(ink, footprint=_disk(delta))
    if delta < 0:
        return ndimage.grey_erosion(ink, footprint=_disk(-delta))
    return ink


def _affine(ink: np.ndarray, shear_deg: float, scale_y: float, rot_deg: float,
            shift: tuple[float, float]) -> np.ndarray:
    size = ink.shape[0]
    center = (size - 1) / 2.0
    shear = math.tan(math.radians(shear_deg))
    rot = math.radians(rot_deg)
    # output -> input coordinate map, composed about the canvas center
    forward = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    forward = forward @ np.array([[scale_y, 0.0], [0.0, 1.0]])  # (row, col) order
    forward = forward @ np.array([[1.0, 0.0], [shear, 1.0]])  # col' = col + shear*row
    inv = np.linalg.inv(forward)
    offset = np.array([center, center]) - inv @ np.array(
        [center + shift[0], center + shift[1]]
    )
    return ndimage.affine_transform(ink, inv, offset=offset, order=1, cval=0.0)


def _elastic(ink: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    if amplitude <= 0:
        return ink
    size = ink.shape[0]
    sigma = size / 12.0
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, ink.shape), sigma=sigma)
        peak = np.abs(f).max()
        fields.append(f / peak * amplitude if peak > 0 else f)
    dy, dx = fields
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ndimage.map_coordinates(ink, [yy + dy, xx + dx], order=1, cval=0.0)


def render_glyph(
    base: np.ndarray, style: WriterStyle, item_rng: np.random.Generator
) -> np.ndarray:
    """Apply one writer's style to a base glyph; returns uint8 white-bg image."""
    size = base.shape[0]
    _, _, _, scale_y = _CATEGORY_BASE[style.category]
    ink = _adjust_thickness(base, style.thickness)
    rot = float(item_rng.uniform(-2.0, 2.0))
    shift = tuple(item_rng.uniform(-0.03 * size, 0.03 * size, size=2))
    ink = _affine(ink, style.shear_deg, scale_y, rot, shift)
    ink = _elastic(ink, style.elastic_amp, item_rng)
    ink = np.clip(ink, 0.0, 1.0) * style.ink
    return np.round((1.0 - ink) * 255.0).astype(np.uint8)


def synthesize_corpus(
    cfg: SynthesisConfig,
    font_glyphs: list[np.ndarray],
    out_dir: str | os.PathLike,
) -> DatasetManifest:
    """Emit n_writers x chars_per_writer PNGs plus their manifest.

    Deterministic in cfg.seed: every image's randomness comes from
    (seed, writer index, char index).
    """
    cfg.validate()
    if len(font_glyphs) < cfg.chars_per_writer:
        raise ValueError(
            f"need at least {cfg.chars_per_writer} base glyphs, got {len(font_glyphs)}"
        )
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {images_dir}: {exc}") from exc

    records: list[GlyphRecord] = []
    for w in range(cfg.n_writers):
        style = writer_style(cfg, w)
        for c in range(cfg.chars_per_writer):
            item_rng = derive_rng(cfg.seed, "item", w, c)
            img = render_glyph(font_glyphs[c], style, item_rng)
            name = f"w{w:03d}_c{c:03d}.png"
            path = images_dir / name
            Image.fromarray(img, mode="L").save(path)
            records.append(
                GlyphRecord(
                    record_id=f"w{w:03d}_c{c:03d}",
                    image_path=path.resolve(),
                    writer_id=f"w{w:03d}",
                    character_id=f"c{c:03d}",
                    category=style.category,
                )
            )
    return DatasetManifest(records=records, source="synthetic")
