"""Domain types, dataset manifests and raster I/O shared across the pipeline."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

BACILLI = "bacilli"
NON_BACILLI = "non_bacilli"
LABELS = (NON_BACILLI, BACILLI)

SPLITS = ("train", "test")
MASK_THRESHOLD = 127


class DataError(Exception):
    """Input data violates a contract (bad raster, bad manifest, size mismatch)."""


class ManifestError(DataError):
    pass


class DimensionError(DataError, ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray
    id: str
    source_path: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DimensionError(f"image {self.id!r}: expected HxWx3 pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionError(f"image {self.id!r}: empty raster")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise DataError(f"image {self.id!r}: channel values outside [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise DimensionError(f"mask {self.image_id!r}: expected HxW bits, got {b.shape}")
        if b.dtype == bool:
            b = b.astype(np.uint8)
        elif not np.isin(b, (0, 1)).all():
            raise DataError(f"mask {self.image_id!r}: values outside {{0, 1}}")
        object.__setattr__(self, "bits", _frozen(b.astype(np.uint8, copy=False)))

    @property
    def dims(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    split: str

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    dataset_name: str = ""

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def split_counts(self) -> tuple[int, int]:
        return len(self.split("train")), len(self.split("test"))


@dataclass(frozen=True, eq=False)
class Roi:
    """A crop around one connected component, in source-image pixel coordinates.

    ``bbox`` is ``(x, y, w, h)``. ``area_px`` is the component's pixel count.
    """

    bbox: tuple[int, int, int, int]
    pixels: np.ndarray = field(repr=False)
    component_id: int
    source_image_id: str
    area_px: int

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w < 1 or h < 1:
            raise DimensionError(f"roi {self.region_id}: degenerate bbox {self.bbox}")
        if self.area_px > w * h:
            raise DataError(f"roi {self.region_id}: area {self.area_px} exceeds bbox {w}x{h}")
        object.__setattr__(self, "pixels", _frozen(np.asarray(self.pixels, dtype=np.uint8)))

    @property
    def region_id(self) -> str:
        return f"{self.source_image_id}_c{self.component_id}"


@dataclass(frozen=True, eq=False)
class LabeledRegion:
    roi: Roi
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"unknown region label {self.label!r}")


# ---------------------------------------------------------------- raster I/O

def _read_raster(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise DataError(f"{path}: only 8-bit rasters are supported (mode {im.mode})")
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc


def load_image(path, image_id: str | None = None) -> Image:
    arr = _read_raster(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return Image(arr, image_id or Path(path).stem, str(path))


def save_image(image: Image | np.ndarray, path) -> None:
    px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(px, mode="RGB").save(path)


def load_mask(path, expected_dims: tuple[int, int] | None = None,
              image_id: str | None = None) -> BinaryMask:
    arr = _read_raster(path)
    first = arr if arr.ndim == 2 else arr[:, :, 0]
    if expected_dims is not None and tuple(first.shape) != tuple(expected_dims):
        raise DimensionError(
            f"{path}: mask is {first.shape[0]}x{first.shape[1]}, expected "
            f"{expected_dims[0]}x{expected_dims[1]}")
    return BinaryMask((first > MASK_THRESHOLD).astype(np.uint8), image_id or Path(path).stem)


def save_mask(mask: BinaryMask | np.ndarray, path) -> None:
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((bits > 0).astype(np.uint8) * 255, mode="L").save(path)


# ---------------------------------------------------------------- manifests

def load_manifest(path) -> DatasetManifest:
    """Parse a tab-separated manifest: ``image_path<TAB>mask_path<TAB>split``.

    Relative paths resolve against the manifest's directory. Lines starting
    with ``#`` are comments; a ``# dataset: <name>`` comment names the dataset
    (otherwise the file stem is used).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    name = path.stem
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            body = line.lstrip()[1:].strip()
            if body.lower().startswith("dataset:"):
                name = body.split(":", 1)[1].strip() or name
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        img, msk, split = (f.strip() for f in fields)
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        img_p, msk_p = base / img, base / msk
        if not img_p.is_file():
            raise ManifestError(f"{path}:{lineno}: image not found: {img_p}")
        if not msk_p.is_file():
            raise ManifestError(f"{path}:{lineno}: mask not found: {msk_p}")
        entry = ManifestEntry(str(img_p), str(msk_p), split)
        if entry.image_id in seen:
            raise ManifestError(
                f"{path}:{lineno}: duplicate image id {entry.image_id!r} "
                f"(first seen on line {seen[entry.image_id]})")
        seen[entry.image_id] = lineno
        entries.append(entry)
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    return DatasetManifest(tuple(entries), name)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = [f"# dataset: {manifest.dataset_name}"] if manifest.dataset_name else []
    for e in manifest.entries:
        img = os.path.relpath(Path(e.image_path).resolve(), base)
        msk = os.path.relpath(Path(e.mask_path).resolve(), base)
        lines.append(f"{img}\t{msk}\t{e.split}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_entry(entry: ManifestEntry) -> tuple[Image, BinaryMask]:
    image = load_image(entry.image_path, entry.image_id)
    mask = load_mask(entry.mask_path, image.dims, entry.image_id)
    return image, mask


def validate_manifest(manifest: DatasetManifest) -> None:
    """Load every mask against its image's dims; raises on the first failure."""
    for entry in manifest.entries:
        load_entry(entry)
