"""Synthetic ZN-style smear images with exact rod masks.

Rods are constant-width strokes along quadratic Bezier arcs in magenta/pink
hues on a blue-cyan background; distractors (round debris, stain streaks and
tiny specks) use blue-violet hues next to the background and never enter the
mask. Pixel (i, j) has its centre at (x=j, y=i); a pixel belongs to a rod's
mask iff its centre lies within half the rod width of the rod's centreline.
"""

from __future__ import annotations

import colorsys
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import (BACILLI, NON_BACILLI, BinaryMask, DatasetManifest, Image, LabeledRegion,
                        ManifestEntry, Roi, save_image, save_mask, write_manifest)
from .roiext import MARGIN, crop, expand_bbox

SEGMENTS = 32
SUPERSAMPLE = 4
GAP = 2


class PlacementError(RuntimeError):
    pass


class SplitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (512, 512)  # (W, H)
    n_rods: tuple[int, int] = (6, 14)
    rod_length: tuple[float, float] = (15.0, 60.0)
    rod_width: tuple[float, float] = (4.0, 8.0)
    rod_curvature: float = 0.3
    rod_hue: tuple[float, float] = (300.0, 345.0)
    background_hue: tuple[float, float] = (170.0, 215.0)
    distractor_hue: tuple[float, float] = (222.0, 285.0)
    n_distractors: tuple[int, int] = (6, 14)
    noise_sigma: float = 6.0
    seed: int = 0
    allow_overlap: bool = False
    max_tries: int = 500

    def __post_init__(self):
        for name in ("n_rods", "rod_length", "rod_width", "rod_hue", "background_hue",
                     "distractor_hue", "n_distractors"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if self.n_rods[0] < 0 or self.n_distractors[0] < 0:
            raise ValueError("object counts must be non-negative")
        if self.rod_width[0] <= 0 or self.rod_length[0] < 0:
            raise ValueError("rod dimensions must be positive")
        if not 0 <= self.rod_curvature <= 1:
            raise ValueError("rod_curvature must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if _hue_overlap(self.rod_hue, self.background_hue) or _hue_overlap(self.rod_hue, self.distractor_hue):
            raise ValueError("rod hue window must be disjoint from background and distractor hues")
        w, h = self.image_size
        if w < 1 or h < 1:
            raise ValueError("image_size must be positive")


def _hue_overlap(a, b) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


@dataclass(frozen=True, eq=False)
class Stroke:
    """A capsule of ``width`` swept along a quadratic Bezier from p0 via p1 to p2."""

    p0: tuple[float, float]
    p1: tuple[float, float]
    p2: tuple[float, float]
    width: float
    kind: str = "rod"
    polyline: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.linspace(0.0, 1.0, SEGMENTS + 1)[:, None]
        p0, p1, p2 = (np.asarray(p, float) for p in (self.p0, self.p1, self.p2))
        object.__setattr__(self, "polyline", (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2)

    @property
    def radius(self) -> float:
        return self.width / 2.0

    def bounds(self, pad: float = 0.0) -> tuple[float, float, float, float]:
        lo = self.polyline.min(0) - self.radius - pad
        hi = self.polyline.max(0) + self.radius + pad
        return lo[0], lo[1], hi[0], hi[1]

    def distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Distance from points to the centreline polyline."""
        pts = np.stack([np.ravel(xs), np.ravel(ys)], axis=1)[:, None, :]
        a, b = self.polyline[:-1][None], self.polyline[1:][None]
        ab = b - a
        denom = np.maximum((ab ** 2).sum(-1), 1e-12)
        u = np.clip(((pts - a) * ab).sum(-1) / denom, 0.0, 1.0)
        d = np.sqrt((((a + u[..., None] * ab) - pts) ** 2).sum(-1)).min(axis=1)
        return d.reshape(np.shape(xs))


def footprint(stroke: Stroke, dims: tuple[int, int]) -> np.ndarray:
    """Whole-image footprint by direct evaluation at every pixel centre."""
    H, W = dims
    ys, xs = np.mgrid[0:H, 0:W]
    return stroke.distance(xs.astype(float), ys.astype(float)) <= stroke.radius


def _local(stroke: Stroke, dims, pad: float):
    H, W = dims
    x0, y0, x1, y1 = stroke.bounds(pad)
    x0, y0 = max(0, int(math.floor(x0))), max(0, int(math.floor(y0)))
    x1, y1 = min(W, int(math.ceil(x1)) + 1), min(H, int(math.ceil(y1)) + 1)
    return x0, y0, x1, y1


def rasterize(stroke: Stroke, dims) -> tuple[tuple[int, int, int, int], np.ndarray, np.ndarray]:
    """Local window, pixel-centre footprint and anti-aliased coverage in [0, 1]."""
    x0, y0, x1, y1 = _local(stroke, dims, 1.0)
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(float)
    d = stroke.distance(xs, ys)
    inside = d <= stroke.radius
    cover = inside.astype(float)
    # sub-pixel samples lie within sqrt(2)/2 of the centre; only edge pixels are mixed
    edge = np.abs(d - stroke.radius) < 0.75
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    dx, dy = (a.ravel() for a in np.meshgrid(offs, offs))
    ex, ey = xs[edge][:, None] + dx, ys[edge][:, None] + dy
    cover[edge] = (stroke.distance(ex, ey) <= stroke.radius).mean(axis=1)
    return (x0, y0, x1, y1), inside, cover


def _hsv(h_deg: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((h_deg % 360.0) / 360.0, s, v))


class _Canvas:
    def __init__(self, dims, rng, allow_overlap):
        self.dims = dims
        self.rng = rng
        self.allow_overlap = allow_overlap
        self.occupied = np.zeros(dims, dtype=bool)

    def place(self, make, max_tries):
        """Draw strokes from ``make`` until one fits without touching others."""
        H, W = self.dims
        for _ in range(max_tries):
            s = make()
            x0, y0, x1, y1 = s.bounds()
            if x0 < 1 or y0 < 1 or x1 > W - 2 or y1 > H - 2:
                continue
            win = _local(s, self.dims, 1.0 + GAP)
            wx0, wy0, wx1, wy1 = win
            ys, xs = np.mgrid[wy0:wy1, wx0:wx1].astype(float)
            d = s.distance(xs, ys)
            if not (d <= s.radius).any():
                continue
            # sub-pixel samples sit within sqrt(2)/2 of a centre, so r + 1 bounds
            # the painted area; GAP more pixels keep neighbours 8-disconnected
            if not self.allow_overlap and (self.occupied[wy0:wy1, wx0:wx1] & (d <= s.radius + 1 + GAP)).any():
                continue
            self.occupied[wy0:wy1, wx0:wx1] |= d <= s.radius + 1
            win, inside, cover = rasterize(s, self.dims)
            return s, win, inside, cover
        raise PlacementError(f"could not place {make.__name__} after {max_tries} tries")


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _random_stroke(rng, dims, length, width, curvature, kind):
    H, W = dims
    cx, cy = rng.uniform(0, W), rng.uniform(0, H)
    theta = rng.uniform(0, math.pi)
    dx, dy = math.cos(theta) * length / 2, math.sin(theta) * length / 2
    bend = rng.uniform(-1, 1) * curvature * length
    p0, p2 = (cx - dx, cy - dy), (cx + dx, cy + dy)
    p1 = (cx - math.sin(theta) * bend, cy + math.cos(theta) * bend)
    return Stroke(p0, p1, p2, width, kind)


def _background(rng, cfg: SynthConfig, dims) -> np.ndarray:
    H, W = dims
    base = _hsv(_uniform(rng, cfg.background_hue), rng.uniform(0.22, 0.4), rng.uniform(0.84, 0.94))
    # smooth illumination falloff plus low-frequency stain texture
    ys, xs = np.mgrid[0:H, 0:W]
    cx, cy = rng.uniform(0.2, 0.8) * W, rng.uniform(0.2, 0.8) * H
    r2 = ((xs - cx) / W) ** 2 + ((ys - cy) / H) ** 2
    illum = 1.0 - rng.uniform(0.1, 0.3) * r2 / 0.5
    texture = ndimage.gaussian_filter(rng.normal(size=(H, W)), sigma=12, mode="wrap")
    texture /= max(texture.std(), 1e-9)
    img = base[None, None, :] * illum[..., None] * (1.0 + 0.03 * texture[..., None])
    return img


def _paint(img, win, cover, color, opacity=1.0):
    x0, y0, x1, y1 = win
    a = (cover * opacity)[..., None]
    img[y0:y1, x0:x1] = img[y0:y1, x0:x1] * (1 - a) + color[None, None, :] * a


def generate(config: SynthConfig, image_id: str | None = None):
    """Render one image.

    Returns ``(Image, BinaryMask, regions)`` where ``regions`` are one
    positive :class:`LabeledRegion` per rod, one negative per distractor, and
    background crops until negatives match positives in number.
    """
    rng = np.random.default_rng(config.seed)
    W, H = config.image_size
    dims = (H, W)
    image_id = image_id or f"synth_{config.seed}"
    img = _background(rng, config, dims)
    canvas = _Canvas(dims, rng, config.allow_overlap)
    mask = np.zeros(dims, dtype=np.uint8)

    rods = []
    for _ in range(int(rng.integers(config.n_rods[0], config.n_rods[1] + 1))):
        def rod():
            return _random_stroke(rng, dims, _uniform(rng, config.rod_length),
                                  _uniform(rng, config.rod_width), config.rod_curvature, "rod")
        s, win, inside, cover = canvas.place(rod, config.max_tries)
        x0, y0, x1, y1 = win
        mask[y0:y1, x0:x1] |= inside.astype(np.uint8)
        color = _hsv(_uniform(rng, config.rod_hue), rng.uniform(0.3, 0.75), rng.uniform(0.55, 0.85))
        _paint(img, win, cover, color)
        rods.append((s, win, inside))

    distractors = []
    for _ in range(int(rng.integers(config.n_distractors[0], config.n_distractors[1] + 1))):
        kind = ("debris", "streak", "speck")[int(rng.integers(3))]

        def distractor(kind=kind):
            if kind == "debris":
                return _random_stroke(rng, dims, rng.uniform(0, 10), rng.uniform(8, 20), 0.0, kind)
            if kind == "streak":
                return _random_stroke(rng, dims, rng.uniform(40, 120), rng.uniform(2, 3.5), 0.4, kind)
            return _random_stroke(rng, dims, 0.0, rng.uniform(2.0, 4.0), 0.0, kind)
        distractor.__name__ = kind
        s, win, inside, cover = canvas.place(distractor, config.max_tries)
        hue = _uniform(rng, config.distractor_hue)
        if kind == "streak":
            color, opacity = _hsv(hue, rng.uniform(0.3, 0.5), rng.uniform(0.55, 0.75)), rng.uniform(0.5, 0.8)
        else:
            color, opacity = _hsv(hue, rng.uniform(0.45, 0.75), rng.uniform(0.4, 0.65)), 1.0
        _paint(img, win, cover, color, opacity)
        distractors.append((s, win, inside))

    noise = rng.normal(0.0, config.noise_sigma, size=img.shape) if config.noise_sigma > 0 else 0.0
    pixels = np.clip(np.rint(img * 255.0 + noise), 0, 255).astype(np.uint8)
    image = Image(pixels, image_id)
    truth = BinaryMask(mask, image_id)
    return image, truth, _regions(image, truth, rods, distractors, rng)


def _object_roi(image, win, inside, cid):
    x0, y0 = win[0], win[1]
    ys, xs = np.nonzero(inside)
    bbox = (x0 + int(xs.min()), y0 + int(ys.min()),
            int(xs.max() - xs.min()) + 1, int(ys.max() - ys.min()) + 1)
    bbox = expand_bbox(bbox, MARGIN, image.dims)
    return Roi(bbox, crop(image, bbox), cid, image.id, int(inside.sum()))


def _regions(image, truth, rods, distractors, rng):
    out = [LabeledRegion(_object_roi(image, w, ins, i + 1), BACILLI)
           for i, (_, w, ins) in enumerate(rods)]
    negs = []
    for _, w, ins in distractors:
        if ins.any():
            roi = _object_roi(image, w, ins, -(len(negs) + 1))
            x, y, bw, bh = roi.bbox
            if truth.bits[y:y + bh, x:x + bw].any():
                continue
            negs.append(LabeledRegion(roi, NON_BACILLI))
    sizes = [(r.roi.bbox[2], r.roi.bbox[3], r.roi.area_px) for r in out] or [(16, 16, 0)]
    H, W = image.dims
    tries = 0
    while len(negs) < len(out) and tries < 200 * len(out):
        tries += 1
        bw, bh, area = sizes[int(rng.integers(len(sizes)))]
        if bw > W or bh > H:
            continue
        x, y = int(rng.integers(0, W - bw + 1)), int(rng.integers(0, H - bh + 1))
        if truth.bits[y:y + bh, x:x + bw].any():
            continue
        bbox = (x, y, bw, bh)
        negs.append(LabeledRegion(Roi(bbox, crop(image, bbox), -(len(negs) + 1), image.id, area),
                                  NON_BACILLI))
    return out + negs


def generate_corpus(config: SynthConfig, n_images: int, out_dir, name: str = "synthetic") -> DatasetManifest:
    """Write ``images/``, ``masks/`` and ``manifest.tsv``; the first 80% (rounded up) train."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_train = math.ceil(0.8 * n_images)
    if n_train == n_images:
        warnings.warn(f"{n_images} image(s) leave an empty test split", SplitWarning, stacklevel=2)
    entries = []
    for i in range(n_images):
        image_id = f"img_{i:04d}"
        cfg = replace(config, seed=config.seed + i)
        image, mask, _ = generate(cfg, image_id)
        img_p, msk_p = out / "images" / f"{image_id}.png", out / "masks" / f"{image_id}.png"
        save_image(image, img_p)
        save_mask(mask, msk_p)
        entries.append(ManifestEntry(str(img_p), str(msk_p), "train" if i < n_train else "test"))
    manifest = DatasetManifest(tuple(entries), name)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
