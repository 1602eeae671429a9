"""Global Otsu thresholding baselines for comparison with the U-Net segmenter."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imagecore import BinaryMask, Image


class DegenerateThresholdWarning(UserWarning):
    """The histogram has a single occupied level, so no split is meaningful."""


@dataclass(frozen=True)
class OtsuConfig:
    channel: str = "grayscale"
    invert: bool = False
    morphology: str | None = None  # "open" | "close" | None
    radius: int = 1

    def __post_init__(self):
        if self.channel not in ("grayscale", "red_minus_green"):
            raise ValueError(f"unknown Otsu channel {self.channel!r}")
        if self.morphology not in (None, "open", "close"):
            raise ValueError(f"unknown morphology {self.morphology!r}")
        if self.radius < 0:
            raise ValueError("morphology radius must be >= 0")


# Rods are darker than the background in grey and redder than it in R-G.
PRESETS = {
    "gray": OtsuConfig("grayscale", invert=True, morphology="open", radius=1),
    "rg": OtsuConfig("red_minus_green", invert=False, morphology="close", radius=1),
}


def otsu_threshold(histogram) -> int:
    """Level t maximising between-class variance of {<= t} vs {> t}.

    Uses exact integer arithmetic; ties go to the lowest t. For a single
    occupied level that level is returned and a
    :class:`DegenerateThresholdWarning` is raised.
    """
    hist = [int(v) for v in np.asarray(histogram).ravel()]
    if len(hist) != 256:
        raise ValueError(f"expected 256 bins, got {len(hist)}")
    if any(v < 0 for v in hist):
        raise ValueError("histogram counts must be non-negative")
    n = sum(hist)
    if n == 0:
        raise ValueError("empty histogram")
    s = sum(i * v for i, v in enumerate(hist))
    # sigma_b^2(t) * n^2 = (n * s0 - s * n0)^2 / (n0 * n1)
    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n * s0 - s * n0) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None:
        level = next(i for i, v in enumerate(hist) if v)
        warnings.warn(f"single-level histogram at {level}; threshold is degenerate",
                      DegenerateThresholdWarning, stacklevel=2)
        return level
    return best_t


def project(image: Image, channel: str) -> np.ndarray:
    """8-bit single-channel view used for thresholding."""
    px = image.pixels.astype(np.int32)
    if channel == "grayscale":
        # ITU-R 601 luma, integer rounding
        return ((299 * px[..., 0] + 587 * px[..., 1] + 114 * px[..., 2] + 500) // 1000).astype(np.uint8)
    if channel == "red_minus_green":
        return ((px[..., 0] - px[..., 1] + 255) // 2).astype(np.uint8)
    raise ValueError(f"unknown Otsu channel {channel!r}")


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx * xx + yy * yy <= radius * radius


def otsu_segment(image: Image, config: OtsuConfig = PRESETS["rg"]) -> BinaryMask:
    plane = project(image, config.channel)
    t = otsu_threshold(np.bincount(plane.ravel(), minlength=256))
    bits = plane > t
    if config.invert:
        bits = ~bits
    if config.morphology and config.radius > 0:
        op = ndimage.binary_opening if config.morphology == "open" else ndimage.binary_closing
        bits = op(bits, structure=_disk(config.radius), border_value=0)
    return BinaryMask(bits.astype(np.uint8), image.id)


def preset(name: str) -> OtsuConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown Otsu preset {name!r}; choose from {sorted(PRESETS)}") from None
