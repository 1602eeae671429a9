"""Training loop for the segmentation network."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .imagecore import DatasetManifest, DataError, load_entry
from .segmodel import AttentionResUNet, SegModelConfig, build_model, save_checkpoint, to_tensor
from .tiling import tile, tile_mask

log = logging.getLogger(__name__)

LOSSES = ("bce", "bce_plus_dice")
DICE_SMOOTH = 1.0
BCE_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    patience: int = 3
    min_delta: float = 1e-4
    batch_size: int = 8
    learning_rate: float = 1e-3
    validation_fraction: float = 0.1
    seed: int = 0
    loss: str = "bce_plus_dice"
    flips: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must be < max_epochs")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_accuracy: float
    train_jaccard: float
    train_loss: float
    val_accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def loss(prob_map, truth, kind: str = "bce"):
    """Mean binary cross-entropy, optionally plus (1 - soft Dice).

    Accepts torch tensors (differentiable) or array-likes (returns a float).
    """
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    as_float = not isinstance(prob_map, torch.Tensor)
    p = torch.as_tensor(np.asarray(prob_map, dtype=np.float64)) if as_float else prob_map
    t = getattr(truth, "bits", truth)
    t = torch.as_tensor(np.asarray(t), dtype=p.dtype) if not isinstance(t, torch.Tensor) else t.to(p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and truth {tuple(t.shape)} differ")
    pc = p.clamp(BCE_EPS, 1 - BCE_EPS)
    value = -(t * torch.log(pc) + (1 - t) * torch.log1p(-pc)).mean()
    if kind == "bce_plus_dice":
        inter = (p * t).sum()
        value = value + 1 - (2 * inter + DICE_SMOOTH) / (p.sum() + t.sum() + DICE_SMOOTH)
    return float(value) if as_float else value


class EarlyStopping:
    """Tracks the best monitored value; ``update`` returns True when training should stop."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        if self.best is None or value > self.best + self.min_delta:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.stale == 0


def manifest_patches(manifest: DatasetManifest, split: str = "train", patch_size: int = 256,
                     policy: str = "crop") -> tuple[np.ndarray, np.ndarray]:
    images, masks = [], []
    for entry in manifest.split(split):
        image, mask = load_entry(entry)
        images.extend(p.pixels for p in tile(image, patch_size, policy))
        masks.extend(m.bits for _, m in tile_mask(mask, patch_size, policy))
    if not images:
        raise DataError(f"no {split} patches in manifest {manifest.dataset_name!r}")
    return np.stack(images), np.stack(masks)


def _pixel_stats(prob, truth):
    pred = prob >= 0.5
    t = truth >= 0.5
    correct = int((pred == t).sum())
    inter = int((pred & t).sum())
    union = int((pred | t).sum())
    return correct, inter, union, pred.numel()


@torch.no_grad()
def _accuracy(model, x, y, batch_size) -> float:
    model.eval()
    correct = total = 0
    for i in range(0, len(x), batch_size):
        c, _, _, n = _pixel_stats(model(x[i:i + batch_size]), y[i:i + batch_size])
        correct, total = correct + c, total + n
    return correct / total


def train_on_patches(images: np.ndarray, masks: np.ndarray, seg_config: SegModelConfig,
                     train_config: TrainConfig, val_images=None, val_masks=None,
                     checkpoint_dir=None, log_path=None, model: AttentionResUNet | None = None):
    """Fit on uint8 patches (N x S x S x 3) with {0,1} masks (N x S x S).

    Without an explicit validation set, ``validation_fraction`` of the patches
    is held out by a seeded shuffle. Returns ``(model, records)`` where the
    model carries the weights of the best-validation epoch.
    """
    cfg = train_config
    if len(images) == 0:
        raise DataError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    if val_images is None:
        order = rng.permutation(len(images))
        n_val = max(1, int(round(cfg.validation_fraction * len(images))))
        if n_val >= len(images):
            raise DataError(f"{len(images)} patch(es) leave nothing to train on after validation split")
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        val_images, val_masks = images[val_idx], masks[val_idx]
        images, masks = images[train_idx], masks[train_idx]
    x_all, y_all = to_tensor(images), torch.from_numpy(np.asarray(masks, dtype=np.float32))[:, None]
    x_val, y_val = to_tensor(val_images), torch.from_numpy(np.asarray(val_masks, dtype=np.float32))[:, None]

    torch.manual_seed(cfg.seed)
    if model is None:
        model = build_model(seg_config, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best_state = copy.deepcopy(model.state_dict())
    records: list[EpochRecord] = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            perm = torch.from_numpy(rng.permutation(len(x_all)))
            loss_sum = 0.0
            correct = inter = union = total = 0
            for i in range(0, len(perm), cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                xb, yb = x_all[idx], y_all[idx]
                if cfg.flips:
                    if rng.random() < 0.5:
                        xb, yb = xb.flip(-1), yb.flip(-1)
                    if rng.random() < 0.5:
                        xb, yb = xb.flip(-2), yb.flip(-2)
                prob = model(xb)
                value = loss(prob, yb, cfg.loss)
                if not torch.isfinite(value):
                    raise TrainingError(f"non-finite loss {value.item()} at epoch {epoch}, batch {i // cfg.batch_size}")
                opt.zero_grad()
                value.backward()
                opt.step()
                loss_sum += value.item() * len(idx)
                c, it, un, n = _pixel_stats(prob.detach(), yb)
                correct, inter, union, total = correct + c, inter + it, union + un, total + n
            rec = EpochRecord(epoch, correct / total, 1.0 if union == 0 else inter / union,
                              loss_sum / len(x_all), _accuracy(model, x_val, y_val, cfg.batch_size))
            records.append(rec)
            log.info("epoch %s", rec.to_json())
            if log_file:
                log_file.write(rec.to_json() + "\n")
            stop = stopper.update(epoch, rec.val_accuracy)
            if stopper.improved:
                best_state = copy.deepcopy(model.state_dict())
                if checkpoint_dir:
                    save_checkpoint(model, Path(checkpoint_dir) / "best.pt", {"epoch": epoch})
            if stop:
                break
    finally:
        if log_file:
            log_file.close()
    model.load_state_dict(best_state)
    model.eval()
    model.best_epoch = stopper.best_epoch
    return model, records


def train(manifest: DatasetManifest, seg_config: SegModelConfig = SegModelConfig(),
          train_config: TrainConfig = TrainConfig(), policy: str = "crop", **kwargs):
    if not manifest.split("train"):
        raise DataError("manifest has no train entries")
    images, masks = manifest_patches(manifest, "train", seg_config.input_size, policy)
    return train_on_patches(images, masks, seg_config, train_config, **kwargs)


