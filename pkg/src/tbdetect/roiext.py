"""Connected-component analysis of masks and ROI cropping."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import (BACILLI, NON_BACILLI, BinaryMask, DimensionError, Image, LabeledRegion,
                        Roi, save_image)

MIN_AREA = 20
MAX_AREA = 5000
MARGIN = 4

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


class InsufficientRegionsWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Component:
    id: int
    pixels: np.ndarray  # (n, 2) array of (y, x)
    bbox: tuple[int, int, int, int]  # (x, y, w, h)

    @property
    def area(self) -> int:
        return len(self.pixels)


def label(mask, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label image (0 = background) with ids in raster order of first pixel."""
    if connectivity not in _STRUCTURE:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    bits = np.asarray(mask.bits if isinstance(mask, BinaryMask) else mask)
    labels, n = ndimage.label(bits, structure=_STRUCTURE[connectivity])
    if n > 1:
        # enforce first-pixel raster order regardless of the labeller's internals
        flat = labels.ravel()
        ids, first = np.unique(flat, return_index=True)
        keep = ids > 0
        order = ids[keep][np.argsort(first[keep], kind="stable")]
        remap = np.zeros(n + 1, dtype=labels.dtype)
        remap[order] = np.arange(1, n + 1, dtype=labels.dtype)
        labels = remap[labels]
    return labels, n


def connected_components(mask, connectivity: int = 8) -> list[Component]:
    labels, n = label(mask, connectivity)
    if n == 0:
        return []
    comps = []
    for cid, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = np.nonzero(labels[sl] == cid)
        pix = np.stack([ys + sl[0].start, xs + sl[1].start], axis=1)
        bbox = (sl[1].start, sl[0].start, sl[1].stop - sl[1].start, sl[0].stop - sl[0].start)
        comps.append(Component(cid, pix, bbox))
    return comps


def expand_bbox(bbox, margin: int, dims: tuple[int, int]) -> tuple[int, int, int, int]:
    x, y, w, h = bbox
    H, W = dims
    x0, y0 = max(0, x - margin), max(0, y - margin)
    x1, y1 = min(W, x + w + margin), min(H, y + h + margin)
    return x0, y0, x1 - x0, y1 - y0


def crop(image: Image, bbox) -> np.ndarray:
    x, y, w, h = bbox
    return image.pixels[y:y + h, x:x + w]


def extract_rois(image: Image, mask: BinaryMask, min_area: int = MIN_AREA, max_area: int = MAX_AREA,
                 margin: int = MARGIN, connectivity: int = 8) -> list[Roi]:
    if image.dims != mask.dims:
        raise DimensionError(f"image {image.dims} and mask {mask.dims} differ")
    rois = []
    for comp in connected_components(mask, connectivity):
        if not min_area <= comp.area <= max_area:
            continue
        bbox = expand_bbox(comp.bbox, margin, image.dims)
        rois.append(Roi(bbox, crop(image, bbox), comp.id, image.id, comp.area))
    return rois


def harvest_labeled_regions(image: Image, truth_mask: BinaryMask, n_pos: int, n_neg: int, seed: int = 0,
                            min_area: int = MIN_AREA, max_area: int = MAX_AREA, margin: int = MARGIN,
                            max_tries: int = 200) -> list[LabeledRegion]:
    """Positive crops around truth components plus size-matched empty crops.

    Negatives copy the bbox size and component area of a randomly chosen
    positive, so the shape scalars carry no label information; only crops with
    zero truth-mask pixels are accepted. Short supply of either class emits an
    :class:`InsufficientRegionsWarning` and returns what was found.
    """
    rng = np.random.default_rng(seed)
    rois = extract_rois(image, truth_mask, min_area, max_area, margin)
    if len(rois) < n_pos:
        warnings.warn(f"{image.id}: only {len(rois)} positive component(s), {n_pos} requested",
                      InsufficientRegionsWarning, stacklevel=2)
    if len(rois) > n_pos:
        pick = np.sort(rng.choice(len(rois), size=n_pos, replace=False))
        rois = [rois[i] for i in pick]
    out = [LabeledRegion(r, BACILLI) for r in rois]
    if n_neg <= 0:
        return out

    all_pos = extract_rois(image, truth_mask, min_area, max_area, margin)
    if all_pos:
        sizes = [(r.bbox[2], r.bbox[3], r.area_px) for r in all_pos]
    else:
        sizes = [(16, 16, 0)]
    H, W = image.dims
    truth = truth_mask.bits
    integral = np.pad(truth.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    negs = []
    tries = 0
    while len(negs) < n_neg and tries < max_tries * max(n_neg, 1):
        tries += 1
        w, h, area = sizes[rng.integers(len(sizes))]
        if w > W or h > H:
            continue
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        if integral[y + h, x + w] - integral[y, x + w] - integral[y + h, x] + integral[y, x]:
            continue
        bbox = (x, y, int(w), int(h))
        roi = Roi(bbox, crop(image, bbox), -(len(negs) + 1), image.id, int(area))
        negs.append(LabeledRegion(roi, NON_BACILLI))
    if len(negs) < n_neg:
        warnings.warn(f"{image.id}: placed {len(negs)} of {n_neg} negative regions",
                      InsufficientRegionsWarning, stacklevel=2)
    return out + negs


def dump_rois(rois, out_dir) -> list[Path]:
    """Write ``<image_id>_c<component_id>.png`` crops with a JSON sidecar each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for roi in rois:
        stem = out_dir / roi.region_id
        save_image(roi.pixels, stem.with_suffix(".png"))
        stem.with_suffix(".json").write_text(json.dumps(
            {"image_id": roi.source_image_id, "component_id": roi.component_id,
             "bbox": list(roi.bbox), "area": roi.area_px}, sort_keys=True) + "\n")
        paths.append(stem.with_suffix(".png"))
    return paths
