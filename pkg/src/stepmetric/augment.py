"""Random-erasing occlusion synthesis.

Masks axis-aligned rectangles of an image with uniform random pixel
values. Rectangle area fraction and aspect ratio are drawn uniformly
from configured ranges; a rectangle that does not fit inside the image
is redrawn, and after the retry budget is exhausted the largest
rectangle with the sampled aspect is used instead (counted as a
fallback). Applied twice per image, this produces the pseudo-occluded
anomaly samples used during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .labels import LabeledImage, anomaly_label

# Process-wide count of largest-fit fallbacks, for diagnostics.
_FALLBACK_COUNT = 0


def fallback_count() -> int:
    return _FALLBACK_COUNT


def reset_fallback_count() -> None:
    global _FALLBACK_COUNT
    _FALLBACK_COUNT = 0


@dataclass
class RandomErasingParams:
    """Sampling ranges for the erased rectangles.

    area_ratio: erased area as a fraction of the full image area.
    aspect: height/width ratio of the rectangle.
    applications: erasures applied per anomaly sample.
    """

    area_ratio: tuple[float, float] = (0.02, 0.4)
    aspect: tuple[float, float] = (0.3, 3.3)
    applications: int = 2
    max_retries: int = 100

    def validate(self) -> None:
        lo, hi = self.area_ratio
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"area_ratio must satisfy 0 < lo <= hi < 1, got {self.area_ratio}")
        alo, ahi = self.aspect
        if not (0.0 < alo <= ahi) or not (math.isfinite(alo) and math.isfinite(ahi)):
            raise ValueError(f"aspect must satisfy 0 < lo <= hi, got {self.aspect}")
        if self.applications < 0:
            raise ValueError("applications must be >= 0")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass
class EraseRect:
    """Realized rectangle plus the exact sampled quantities behind it."""

    top: int
    left: int
    height: int
    width: int
    sampled_area_frac: float
    sampled_aspect: float
    fallback: bool = False

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return m


def _sample_rect(h_img, w_img, params, rng):
    """Draw (h, w, area_frac, aspect, fallback) for one erasure."""
    global _FALLBACK_COUNT
    area = h_img * w_img
    for _ in range(params.max_retries):
        frac = rng.uniform(params.area_ratio[0], params.area_ratio[1])
        aspect = rng.uniform(params.aspect[0], params.aspect[1])
        target = frac * area
        h = max(1, round(math.sqrt(target * aspect)))
        w = max(1, round(math.sqrt(target / aspect)))
        if h <= h_img and w <= w_img:
            return h, w, frac, aspect, False
    # Largest rectangle with the last sampled aspect that still fits.
    _FALLBACK_COUNT += 1
    max_area = min(h_img * h_img / aspect, w_img * w_img * aspect)
    h = min(h_img, max(1, int(math.sqrt(max_area * aspect))))
    w = min(w_img, max(1, int(math.sqrt(max_area / aspect))))
    return h, w, frac, aspect, True


def random_erase_once(
    image: LabeledImage, params: RandomErasingParams, rng: np.random.Generator
) -> tuple[LabeledImage, EraseRect]:
    """Erase one rectangle; pixels outside it are untouched.

    Returns the new image and the rectangle metadata (the erased region,
    plus the exact area fraction and aspect that were sampled).
    """
    params.validate()
    if image.pixels.size == 0:
        raise ValueError("cannot erase an empty image")
    h_img, w_img = image.pixels.shape[:2]
    h, w, frac, aspect, fell_back = _sample_rect(h_img, w_img, params, rng)
    top = int(rng.integers(0, h_img - h + 1))
    left = int(rng.integers(0, w_img - w + 1))
    pixels = image.pixels.copy()
    pixels[top : top + h, left : left + w, :] = rng.random((h, w, 3), dtype=np.float32)
    rect = EraseRect(top, left, h, w, frac, aspect, fell_back)
    return LabeledImage(pixels, image.label, image.id), rect


def make_anomaly_sample(
    image: LabeledImage, params: RandomErasingParams, rng: np.random.Generator
) -> tuple[LabeledImage, list[EraseRect]]:
    """Apply `params.applications` erasures and retag the label.

    Rectangles may overlap; every pixel outside their union keeps the
    source value bit for bit.
    """
    params.validate()
    out = image
    rects: list[EraseRect] = []
    for _ in range(params.applications):
        out, rect = random_erase_once(out, params, rng)
        rects.append(rect)
    return LabeledImage(out.pixels, anomaly_label(image.label), image.id), rects
