"""Deterministic synthetic shapes corpus.

Each class is one attribute tuple (shape, fill color, background, scale
band); instances within a class vary by jittered position, rotation, scale,
color and pixel noise, all drawn from per-image streams derived from the
base seed. Generation is a pure function of (spec, seed): repeated calls
are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import LabeledImageSet
from .errors import CapacityError, ValidationError
from .seeding import make_rng

SHAPES = ("circle", "square", "triangle", "bar", "ring", "cross")

FILL_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.15, 0.80),
}

BACKGROUND_COLORS = {
    "black": (0.08, 0.08, 0.08),
    "gray": (0.30, 0.30, 0.32),
    "tan": (0.72, 0.66, 0.55),
    "white": (0.92, 0.92, 0.92),
}

# (lo, hi) as a fraction of the image's short side; bands do not overlap
# even after in-band jitter.
SCALE_BANDS = ((0.18, 0.28), (0.36, 0.52))

GRAMMAR_CAPACITY = len(SHAPES) * len(FILL_COLORS) * len(BACKGROUND_COLORS) * len(SCALE_BANDS)

_FILL_NAMES = tuple(FILL_COLORS)
_BG_NAMES = tuple(BACKGROUND_COLORS)


@dataclass(frozen=True)
class ShapesSpec:
    """Size parameters for a synthetic corpus."""

    n_classes: int
    per_class: int
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.per_class < 1:
            raise ValidationError(f"per_class must be >= 1, got {self.per_class}")
        if self.n_classes < 1:
            raise ValidationError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.n_classes > GRAMMAR_CAPACITY:
            raise CapacityError(
                f"n_classes={self.n_classes} exceeds the attribute grammar capacity of {GRAMMAR_CAPACITY}"
            )
        if min(self.image_size) < 8:
            raise ValidationError("image_size must be at least 8x8")


def class_attributes(class_id: int) -> tuple[str, str, str, int]:
    """(shape, fill, background, scale band) for a class id.

    Shapes cycle fastest, then fill colors, then backgrounds, then bands, so
    nearby class ids share everything but shape; a random class split then
    forces encoders to carry both shape and color information.
    """
    shape = SHAPES[class_id % len(SHAPES)]
    fill = _FILL_NAMES[(class_id // len(SHAPES)) % len(_FILL_NAMES)]
    bg = _BG_NAMES[(class_id // (len(SHAPES) * len(_FILL_NAMES))) % len(_BG_NAMES)]
    band = class_id // (len(SHAPES) * len(_FILL_NAMES) * len(_BG_NAMES))
    return shape, fill, bg, band


def _shape_distance(shape: str, x: np.ndarray, y: np.ndarray, radius: float) -> np.ndarray:
    """Signed distance (negative inside) from rotated local coords to the shape."""
    if shape == "circle":
        return np.hypot(x, y) - radius
    if shape == "ring":
        r = np.hypot(x, y)
        return np.maximum(r - radius, 0.55 * radius - r)
    if shape == "square":
        s = 0.82 * radius
        return np.maximum(np.abs(x), np.abs(y)) - s
    if shape == "triangle":
        # equilateral, circumradius = radius, apex pointing up (-y)
        verts = [
            (radius * np.cos(a), radius * np.sin(a))
            for a in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6)
        ]
        d = np.full_like(x, -np.inf)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            ex, ey = x1 - x0, y1 - y0
            norm = np.hypot(ex, ey)
            nx, ny = ey / norm, -ex / norm  # outward normal for CCW winding
            d = np.maximum(d, (x - x0) * nx + (y - y0) * ny)
        return d
    if shape == "bar":
        return np.maximum(np.abs(x) - radius, np.abs(y) - 0.28 * radius)
    if shape == "cross":
        bar1 = np.maximum(np.abs(x) - radius, np.abs(y) - 0.28 * radius)
        bar2 = np.maximum(np.abs(y) - radius, np.abs(x) - 0.28 * radius)
        return np.minimum(bar1, bar2)
    raise ValidationError(f"unknown shape {shape!r}")


def _render(
    shape: str,
    fill: np.ndarray,
    bg: np.ndarray,
    band: tuple[float, float],
    image_size: tuple[int, int],
    rng: np.random.Generator,
) -> np.ndarray:
    h, w = image_size
    short = min(h, w)

    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    cy = h / 2 + rng.uniform(-0.08, 0.08) * h
    theta = rng.uniform(0.0, 2.0 * np.pi)
    radius = rng.uniform(*band) * short
    fill_jit = np.clip(fill + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    bg_jit = np.clip(bg + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)

    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rx = cos_t * dx + sin_t * dy
    ry = -sin_t * dx + cos_t * dy

    d = _shape_distance(shape, rx, ry, radius)
    coverage = np.clip(0.5 - d / 1.5, 0.0, 1.0)[..., None]

    img = bg_jit[None, None, :] * (1.0 - coverage) + fill_jit[None, None, :] * coverage
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_shapes(spec: ShapesSpec, seed: int) -> LabeledImageSet:
    """Generate the synthetic corpus for `spec`, deterministic in `seed`."""
    pixels = np.empty((spec.n_classes * spec.per_class, *spec.image_size, 3), dtype=np.float32)
    class_ids = np.empty(spec.n_classes * spec.per_class, dtype=np.int64)
    image_ids = []
    class_names = []

    i = 0
    for c in range(spec.n_classes):
        shape, fill_name, bg_name, band_idx = class_attributes(c)
        class_names.append(f"{c:03d}_{shape}_{fill_name}_{bg_name}_s{band_idx}")
        fill = np.asarray(FILL_COLORS[fill_name])
        bg = np.asarray(BACKGROUND_COLORS[bg_name])
        band = SCALE_BANDS[band_idx]
        for j in range(spec.per_class):
            rng = make_rng(seed, "shapes", c, j)
            pixels[i] = _render(shape, fill, bg, band, spec.image_size, rng)
            class_ids[i] = c
            image_ids.append(f"{c:03d}/{j:05d}")
            i += 1

    return LabeledImageSet(
        pixels=pixels,
        class_ids=class_ids,
        class_names=tuple(class_names),
        image_ids=tuple(image_ids),
    )
