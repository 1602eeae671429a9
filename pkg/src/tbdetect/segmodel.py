"""Attention Residual U-Net for binary bacilli segmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imagecore import BinaryMask

CHECKPOINT_VERSION = 1
# Keeps sigmoid outputs off the endpoints in float32.
PROB_EPS = 1e-7


@dataclass(frozen=True)
class SegModelConfig:
    input_size: int = 256
    input_channels: int = 3
    depth: int = 4
    base_filters: int = 16
    dropout_rate: float = 0.1
    batchnorm_epsilon: float = 1e-3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.input_size % (2 ** self.depth):
            raise ValueError(f"input_size {self.input_size} not divisible by 2^{self.depth}")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.batchnorm_epsilon <= 0:
            raise ValueError("batchnorm_epsilon must be positive")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level


def _bn(channels: int, eps: float) -> nn.BatchNorm2d:
    # torch momentum 0.1 == running = 0.9 * running + 0.1 * batch
    return nn.BatchNorm2d(channels, eps=eps, momentum=0.1)


class ResidualBlock(nn.Module):
    """conv3x3-BN-dropout-ReLU twice, plus an identity or 1x1-conv+BN shortcut."""

    def __init__(self, in_channels: int, out_channels: int, dropout: float = 0.0, eps: float = 1e-3):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn1 = _bn(out_channels, eps)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = _bn(out_channels, eps)
        self.drop = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        if in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1), _bn(out_channels, eps))

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"residual block expects {self.in_channels} channels, got {x.shape[1]}")
        h = F.relu(self.drop(self.bn1(self.conv1(x))))
        h = F.relu(self.drop(self.bn2(self.conv2(h))))
        return F.relu(h + self.shortcut(x))


class GatingSignal(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, eps: float = 1e-3):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)
        self.bn = _bn(out_channels, eps)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class AttentionGate(nn.Module):
    """Additive attention on a skip connection.

    The skip map ``x`` (C x h x w) is projected by a strided 1x1 conv to the
    resolution of the gating map ``g`` (h/2 x w/2); the summed projections pass
    through ReLU, a 1x1 conv to one channel and a sigmoid. The coefficients are
    bilinearly upsampled to h x w, multiply ``x``, and a 1x1 conv + BN follows.
    """

    def __init__(self, x_channels: int, g_channels: int, inter_channels: int, eps: float = 1e-3):
        super().__init__()
        self.theta_x = nn.Conv2d(x_channels, inter_channels, 1, stride=2, bias=False)
        self.phi_g = nn.Conv2d(g_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)
        self.project = nn.Sequential(nn.Conv2d(x_channels, x_channels, 1), _bn(x_channels, eps))

    def coefficients(self, x, g):
        h, w = x.shape[-2:]
        if g.shape[-2:] != ((h + 1) // 2, (w + 1) // 2) or h % 2 or w % 2:
            raise ValueError(f"gating map {tuple(g.shape[-2:])} must be half of skip map {(h, w)}")
        a = torch.sigmoid(self.psi(F.relu(self.theta_x(x) + self.phi_g(g))))
        # bilinear upsampling is a convex combination, so a stays in [0, 1]
        return F.interpolate(a, size=(h, w), mode="bilinear", align_corners=False)

    def gated(self, x, g):
        """Skip features scaled by the attention map, before the output projection."""
        a = self.coefficients(x, g)
        return x * a, a

    def forward(self, x, g):
        return self.project(self.gated(x, g)[0])


class UpBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class AttentionResUNet(nn.Module):
    def __init__(self, config: SegModelConfig = SegModelConfig()):
        super().__init__()
        self.config = config
        c, eps, p = config, config.batchnorm_epsilon, config.dropout_rate
        self.encoder = nn.ModuleList()
        ch = c.input_channels
        for level in range(c.depth):
            self.encoder.append(ResidualBlock(ch, c.filters(level), p, eps))
            ch = c.filters(level)
        self.bridge = ResidualBlock(ch, c.filters(c.depth), p, eps)
        self.gating = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        # decoder modules are stored deepest level first
        for level in reversed(range(c.depth)):
            deep, f = c.filters(level + 1), c.filters(level)
            self.gating.append(GatingSignal(deep, f, eps))
            self.gates.append(AttentionGate(f, f, f, eps))
            self.ups.append(UpBlock(deep, f))
            self.decoder.append(ResidualBlock(2 * f, f, p, eps))
        self.head = nn.Conv2d(c.filters(0), 1, 1)

    def encode(self, x):
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return skips, self.bridge(x)

    def logits(self, x):
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.input_channels or tuple(x.shape[-2:]) != (size, size):
            raise ValueError(
                f"expected input N x {self.config.input_channels} x {size} x {size}, got {tuple(x.shape)}")
        skips, x = self.encode(x)
        for gating, gate, up, block, skip in zip(self.gating, self.gates, self.ups, self.decoder,
                                                 reversed(skips)):
            attended = gate(skip, gating(x))
            x = block(torch.cat([up(x), attended], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x)).clamp(PROB_EPS, 1.0 - PROB_EPS)


def build_model(config: SegModelConfig = SegModelConfig(), seed: int = 0) -> AttentionResUNet:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = AttentionResUNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    model.seed = seed
    return model


def to_tensor(patches) -> torch.Tensor:
    """uint8 N x H x W x 3 (or a list of patches) -> float N x 3 x H x W in [0, 1]."""
    if isinstance(patches, (list, tuple)):
        patches = np.stack([getattr(p, "pixels", p) for p in patches])
    arr = np.asarray(patches)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float().div_(255.0)


@torch.no_grad()
def predict(model: AttentionResUNet, patches, batch_size: int = 8) -> np.ndarray:
    """Probability maps (N x H x W, float32) for uint8 RGB patches, eval mode."""
    x = to_tensor(patches)
    was_training = model.training
    model.eval()
    try:
        out = [model(x[i:i + batch_size])[:, 0] for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros((0,) + tuple(x.shape[-2:]), np.float32)


def binarize(prob_map, threshold: float = 0.5, image_id: str = "") -> BinaryMask:
    return BinaryMask((np.asarray(prob_map) >= threshold).astype(np.uint8), image_id)


def save_checkpoint(model: AttentionResUNet, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": getattr(model, "seed", None),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path) -> AttentionResUNet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"segmentation checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    model = AttentionResUNet(SegModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.seed = blob.get("seed")
    model.extra = blob.get("extra") or {}
    model.eval()
    return model
