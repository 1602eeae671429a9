"""Deterministic 256x256 patch grids over images and masks, and their reassembly."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .imagecore import BinaryMask, DataError, DimensionError, Image, save_image

PATCH_SIZE = 256
POLICIES = ("crop", "pad")


class TilingError(DataError, ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    image_id: str
    height: int
    width: int
    patch_size: int = PATCH_SIZE
    policy: str = "crop"

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise TilingError(f"unknown tiling policy {self.policy!r}")
        if self.patch_size < 8:
            raise TilingError(f"patch_size must be >= 8, got {self.patch_size}")
        if self.policy == "crop" and (self.height < self.patch_size or self.width < self.patch_size):
            raise TilingError(
                f"image {self.image_id!r} ({self.height}x{self.width}) is smaller than one "
                f"{self.patch_size}x{self.patch_size} patch under crop policy")

    @classmethod
    def for_image(cls, image: Image, patch_size: int = PATCH_SIZE, policy: str = "crop") -> "PatchGrid":
        return cls(image.id, image.height, image.width, patch_size, policy)

    @property
    def rows(self) -> int:
        if self.policy == "crop":
            return self.height // self.patch_size
        return math.ceil(self.height / self.patch_size)

    @property
    def cols(self) -> int:
        if self.policy == "crop":
            return self.width // self.patch_size
        return math.ceil(self.width / self.patch_size)

    def __len__(self) -> int:
        return self.rows * self.cols

    @property
    def covered_dims(self) -> tuple[int, int]:
        return self.rows * self.patch_size, self.cols * self.patch_size

    def positions(self):
        """Grid cells in row-major order."""
        for r in range(self.rows):
            for c in range(self.cols):
                yield r, c

    def origin(self, pos: tuple[int, int]) -> tuple[int, int]:
        r, c = pos
        return r * self.patch_size, c * self.patch_size


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray
    grid_pos: tuple[int, int]
    image_id: str

    @property
    def name(self) -> str:
        return patch_name(self.image_id, self.grid_pos)


def patch_name(image_id: str, pos: tuple[int, int]) -> str:
    return f"{image_id}_r{pos[0]}_c{pos[1]}"


def patch_count(height: int, width: int, patch_size: int = PATCH_SIZE, policy: str = "crop") -> int:
    return len(PatchGrid("", height, width, patch_size, policy))


def _fit_raster(arr: np.ndarray, grid: PatchGrid) -> np.ndarray:
    th, tw = grid.covered_dims
    if grid.policy == "crop":
        return arr[:th, :tw]
    pad = [(0, th - arr.shape[0]), (0, tw - arr.shape[1])] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad)


def _tile_array(arr: np.ndarray, grid: PatchGrid):
    arr = _fit_raster(arr, grid)
    ps = grid.patch_size
    for pos in grid.positions():
        y, x = grid.origin(pos)
        yield pos, arr[y:y + ps, x:x + ps]


def tile(image: Image, patch_size: int = PATCH_SIZE, policy: str = "crop") -> list[Patch]:
    """Split ``image`` into row-major patches.

    Under ``crop`` the right/bottom remainder is discarded; under ``pad`` the
    image is zero-padded up to the next multiple of ``patch_size``.
    """
    grid = PatchGrid.for_image(image, patch_size, policy)
    return [Patch(p, pos, image.id) for pos, p in _tile_array(image.pixels, grid)]


def tile_mask(mask: BinaryMask, patch_size: int = PATCH_SIZE,
              policy: str = "crop") -> list[tuple[tuple[int, int], BinaryMask]]:
    h, w = mask.dims
    grid = PatchGrid(mask.image_id, h, w, patch_size, policy)
    return [(pos, BinaryMask(b, mask.image_id)) for pos, b in _tile_array(mask.bits, grid)]


def stitch(patch_masks, grid: PatchGrid) -> BinaryMask:
    """Reassemble per-cell masks into one mask of ``grid.covered_dims``.

    ``patch_masks`` is an iterable of ``(grid_pos, BinaryMask)`` in any order;
    every cell must appear exactly once.
    """
    ps = grid.patch_size
    out = np.zeros(grid.covered_dims, dtype=np.uint8)
    seen: set[tuple[int, int]] = set()
    for pos, m in patch_masks:
        pos = (int(pos[0]), int(pos[1]))
        if not (0 <= pos[0] < grid.rows and 0 <= pos[1] < grid.cols):
            raise TilingError(f"cell {pos} outside {grid.rows}x{grid.cols} grid")
        if pos in seen:
            raise TilingError(f"duplicate cell {pos}")
        bits = m.bits if isinstance(m, BinaryMask) else np.asarray(m)
        if bits.shape != (ps, ps):
            raise TilingError(f"cell {pos}: mask is {bits.shape}, expected {(ps, ps)}")
        seen.add(pos)
        y, x = grid.origin(pos)
        out[y:y + ps, x:x + ps] = bits
    missing = [p for p in grid.positions() if p not in seen]
    if missing:
        raise TilingError(f"missing {len(missing)} cell(s), first {missing[0]}")
    return BinaryMask(out, grid.image_id)


def crop_to_multiple(arr: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    h, w = arr.shape[:2]
    return arr[: h - h % patch_size, : w - w % patch_size]


def fit_mask(mask: BinaryMask, dims: tuple[int, int]) -> BinaryMask:
    """Crop or zero-pad ``mask`` so it covers exactly ``dims``."""
    h, w = dims
    bits = mask.bits[:h, :w]
    if bits.shape != (h, w):
        bits = np.pad(bits, [(0, h - bits.shape[0]), (0, w - bits.shape[1])])
    return BinaryMask(bits, mask.image_id)


def prepare_image(image: Image, size: tuple[int, int], mode: str = "resize") -> Image:
    """Bring ``image`` to ``size`` = (W, H) by bilinear resize or centred crop."""
    w, h = size
    if image.dims == (h, w):
        return image
    if mode == "resize":
        px = cv2.resize(np.asarray(image.pixels), (w, h), interpolation=cv2.INTER_LINEAR)
    elif mode == "crop":
        px = _center_crop(image.pixels, h, w)
    else:
        raise TilingError(f"unknown reduction mode {mode!r}")
    return Image(px, image.id, image.source_path)


def prepare_mask(mask: BinaryMask, size: tuple[int, int], mode: str = "resize") -> BinaryMask:
    """Mask counterpart of :func:`prepare_image`; resizing uses nearest neighbour."""
    w, h = size
    if mask.dims == (h, w):
        return mask
    if mode == "resize":
        bits = cv2.resize(np.asarray(mask.bits), (w, h), interpolation=cv2.INTER_NEAREST)
    elif mode == "crop":
        bits = _center_crop(mask.bits, h, w)
    else:
        raise TilingError(f"unknown reduction mode {mode!r}")
    return BinaryMask(bits, mask.image_id)


def _center_crop(arr, h, w):
    H, W = arr.shape[:2]
    if H < h or W < w:
        raise DimensionError(f"cannot crop {H}x{W} to larger {h}x{w}")
    y0, x0 = (H - h) // 2, (W - w) // 2
    return arr[y0:y0 + h, x0:x0 + w]


def dump_patches(patches: list[Patch], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in patches:
        path = out_dir / f"{p.name}.png"
        save_image(p.pixels, path)
        paths.append(path)
    return paths
