"""Stage orchestration shared by the command line and the experiment scripts."""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np

from . import baselines
from .classify import DEFAULT_SPEC, FEATURE_SPECS, Hyper, TrainedEnsemble, featurize
from .imagecore import BACILLI, BinaryMask, DataError, DatasetManifest, Image, load_entry
from .metrics import ConfusionCounts, aggregate_seg, classification_scores, fmt
from .roiext import (MARGIN, MAX_AREA, MIN_AREA, InsufficientRegionsWarning, extract_rois,
                     harvest_labeled_regions)
from .segmodel import AttentionResUNet, SegModelConfig, binarize, predict
from .segtrain import TrainConfig
from .tiling import POLICIES, PatchGrid, fit_mask, stitch, tile


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RoiConfig:
    min_area: int = MIN_AREA
    max_area: int = MAX_AREA
    margin: int = MARGIN
    connectivity: int = 8

    def __post_init__(self):
        if not 0 <= self.min_area <= self.max_area:
            raise ConfigError("roi: need 0 <= min_area <= max_area")
        if self.margin < 0:
            raise ConfigError("roi: margin must be >= 0")
        if self.connectivity not in (4, 8):
            raise ConfigError("roi: connectivity must be 4 or 8")


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str | None = None
    output_dir: str = "out"
    seg_checkpoint: str | None = None
    clf_checkpoint: str | None = None
    tiling_policy: str = "crop"
    segmodel: SegModelConfig = SegModelConfig()
    train: TrainConfig = TrainConfig()
    roi: RoiConfig = RoiConfig()
    classifier: Hyper = Hyper()
    feature_spec: str = DEFAULT_SPEC
    per_class: int = 250
    threshold: float = 0.5
    segmenters: tuple[str, ...] = ("unet",)
    aggregation: str = "mean"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.tiling_policy not in POLICIES:
            raise ConfigError(f"unknown tiling policy {self.tiling_policy!r}")
        if self.feature_spec not in FEATURE_SPECS:
            raise ConfigError(f"unknown feature spec {self.feature_spec!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        if self.aggregation not in ("mean", "pooled"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.segmenters:
            raise ConfigError("at least one segmenter is required")
        for s in self.segmenters:
            parse_segmenter(s)

    @property
    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    @property
    def hyper(self) -> Hyper:
        return dataclasses.replace(self.classifier, workers=self.workers)

    def resolve(self, name: str) -> Path:
        """Checkpoint path from the config, else its default under ``output_dir``."""
        explicit = {"seg": self.seg_checkpoint, "clf": self.clf_checkpoint}[name]
        default = {"seg": "segmenter.pt", "clf": "ensemble.joblib"}[name]
        return Path(explicit) if explicit else Path(self.output_dir) / default

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["segmenters"] = list(self.segmenters)
        return d


_NESTED = {"segmodel": SegModelConfig, "train": TrainConfig, "roi": RoiConfig, "classifier": Hyper}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``data`` on ``base`` (defaults if None); nested blocks merge key by key."""
    base = base or PipelineConfig()
    if not isinstance(data, dict):
        raise ConfigError("config: expected an object")
    unknown = sorted(set(data) - {f.name for f in fields(PipelineConfig)})
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    merged = {}
    for key, value in data.items():
        if key in _NESTED:
            current = dataclasses.asdict(getattr(base, key))
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            current.update(value)
            merged[key] = _build(_NESTED[key], current, key)
        elif key == "segmenters":
            merged[key] = tuple([value] if isinstance(value, str) else value)
        else:
            merged[key] = value
    try:
        return dataclasses.replace(base, **merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config: {e}") from None


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from None
    return config_from_dict(data)


# segmentation


def parse_segmenter(name: str) -> tuple[str, str | None]:
    if name == "unet":
        return "unet", None
    kind, _, preset = name.partition(":")
    if kind == "otsu" and preset in baselines.PRESETS:
        return "otsu", preset
    raise ConfigError(f"unknown segmenter {name!r}; use unet or otsu:{{{','.join(sorted(baselines.PRESETS))}}}")


def segment_unet(model: AttentionResUNet, image: Image, policy: str = "crop",
                 threshold: float = 0.5) -> BinaryMask:
    """Patchwise prediction stitched back and fitted to the image size.

    Pixels outside the tiled area (crop policy remainder) are predicted 0.
    """
    size = model.config.input_size
    grid = PatchGrid.for_image(image, size, policy)
    patches = tile(image, size, policy)
    probs = predict(model, patches)
    stitched = stitch([(p.grid_pos, binarize(pr, threshold, image.id)) for p, pr in zip(patches, probs)], grid)
    return fit_mask(stitched, image.dims)


def segment(image: Image, segmenter: str, model: AttentionResUNet | None = None, policy: str = "crop",
            threshold: float = 0.5) -> BinaryMask:
    kind, preset = parse_segmenter(segmenter)
    if kind == "otsu":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", baselines.DegenerateThresholdWarning)
            return baselines.otsu_segment(image, baselines.PRESETS[preset])
    if model is None:
        raise ConfigError("the unet segmenter needs a trained checkpoint")
    return segment_unet(model, image, policy, threshold)


# detection


@dataclass(frozen=True)
class Detection:
    image_id: str
    component_id: int
    bbox: tuple[int, int, int, int]
    area: int
    label: str
    votes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "component_id": self.component_id,
                           "bbox": list(self.bbox), "area": self.area, "label": self.label,
                           "votes": self.votes}, sort_keys=True)


def detect(image: Image, mask: BinaryMask, ensemble: TrainedEnsemble, roi: RoiConfig = RoiConfig()):
    rois = extract_rois(image, mask, roi.min_area, roi.max_area, roi.margin, roi.connectivity)
    if not rois:
        return []
    X = np.stack([featurize(r, ensemble.feature_spec_id).values for r in rois])
    votes = ensemble.votes(X)
    labels = ensemble.predict_codes(X)
    names = [m.kind for m in ensemble.base_models]
    out = []
    for i, r in enumerate(rois):
        vote = {n: (BACILLI if v[i] else "non_bacilli") for n, v in zip(names, votes)}
        out.append(Detection(image.id, r.component_id, tuple(int(v) for v in r.bbox), int(r.area_px),
                             BACILLI if labels[i] else "non_bacilli", vote))
    return out


BOX_COLORS = {BACILLI: (255, 0, 0), "non_bacilli": (0, 200, 255)}


def overlay(image: Image, detections) -> np.ndarray:
    canvas = np.ascontiguousarray(image.pixels.copy())
    for d in detections:
        x, y, w, h = d.bbox
        cv2.rectangle(canvas, (x, y), (x + w - 1, y + h - 1), BOX_COLORS[d.label], 1)
    return canvas


# datasets


def harvest_split(manifest: DatasetManifest, split: str, roi: RoiConfig = RoiConfig(), seed: int = 0):
    """Every truth component of a split as a positive plus as many size-matched negatives.

    Returns LabeledRegions in manifest order.
    """
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"manifest has no {split} entries")
    regions = []
    for i, entry in enumerate(entries):
        image, truth = load_entry(entry)
        n = len(extract_rois(image, truth, roi.min_area, roi.max_area, roi.margin, roi.connectivity))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", InsufficientRegionsWarning)
            regions.extend(harvest_labeled_regions(image, truth, n, n, seed + i, roi.min_area, roi.max_area,
                                                   roi.margin))
    return regions


def featurize_regions(regions, spec: str = DEFAULT_SPEC):
    return [(featurize(r.roi, spec), r.label) for r in regions]


# reports


def segmentation_rows(manifest: DatasetManifest, segmenters, model=None, policy="crop", threshold=0.5,
                      split: str = "test", aggregation: str = "mean"):
    """One row per segmenter; ``jaccard``/``dice`` follow ``aggregation``, both modes are kept."""
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"manifest has no {split} entries")
    pairs = {s: [] for s in segmenters}
    for entry in entries:
        image, truth = load_entry(entry)
        for s in segmenters:
            pairs[s].append((segment(image, s, model, policy, threshold), truth))
    rows = []
    for s in segmenters:
        mean, pooled = aggregate_seg(pairs[s], "mean"), aggregate_seg(pairs[s], "pooled")
        main = mean if aggregation == "mean" else pooled
        rows.append({"method": s, "images": len(entries), "jaccard": main.jaccard, "dice": main.dice,
                     "jaccard_mean": mean.jaccard, "dice_mean": mean.dice,
                     "jaccard_pooled": pooled.jaccard, "dice_pooled": pooled.dice})
    return rows


def classification_rows(ensemble: TrainedEnsemble, samples):
    X = np.stack([fv.values for fv, _ in samples])
    y = np.array([1 if lab == BACILLI else 0 for _, lab in samples])
    models = [(m.kind, m.predict_codes) for m in ensemble.individual_variants]
    models.append(("ensemble", ensemble.predict_codes))
    rows = []
    for name, fn in models:
        s = classification_scores(ConfusionCounts.from_labels(fn(X), y))
        rows.append({"method": name, "regions": int(len(y)), "accuracy": s.accuracy,
                     "precision": s.precision, "recall": s.recall, "f1": s.f1})
    return rows


def _cell(value) -> str:
    return fmt(value) if value is None or isinstance(value, float) else str(value)


def text_table(rows, columns, title: str) -> str:
    """Aligned plain-text table; rates truncated to 4 places."""
    cells = [[_cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [title, line, "-" * len(line)]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out) + "\n"


def write_report(report: dict, out_dir, stem: str) -> tuple[Path, Path]:
    """``<stem>.json`` (machine-readable) and ``<stem>.txt`` (aligned tables)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / f"{stem}.json"
    js.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    parts = []
    if "training" in report:
        parts.append(text_table(report["training"], ["classifier", "bacilli", "non_bacilli", "accuracy"],
                                "Training accuracy"))
    if "segmentation" in report:
        parts.append(text_table(report["segmentation"], ["method", "jaccard", "dice"],
                                f"Segmentation ({report.get('aggregation', 'mean')} over images)"))
    if "classification" in report:
        parts.append(text_table(report["classification"], ["method", "accuracy", "precision", "recall", "f1"],
                                "Classification"))
    txt = out_dir / f"{stem}.txt"
    txt.write_text("\n".join(parts))
    return js, txt

