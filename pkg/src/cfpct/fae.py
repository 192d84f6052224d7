"""Feature-refined autoencoder backbone and the four-level feature pyramid used as a loss net.

Layout, for stage channels ``C1..C4``::

    conv(1->C1) conv(C1->C1) | blocks x n1 -> tap 1
    maxpool conv(C1->C2)     | blocks x n2 -> tap 2
    maxpool conv(C2->C3)     | blocks x n3 -> tap 3
    maxpool conv(C3->C4)     | blocks x n4 -> tap 4

Five plain convolutions, three max-pools, and two-conv residual blocks. Each
tap is the ReLU output of the last layer at that resolution. There are no
normalisation layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .errors import DomainError, ShapeError, ValidationError
from .pipeline import Volume
from .seeding import torch_generator


@dataclass(frozen=True)
class FaeConfig:
    input_size: int = 256
    stage_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: tuple = (3, 4, 23, 1)
    residual_layers: int = 31
    width_multiplier: float = 1.0

    def validate(self) -> "FaeConfig":
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValidationError("stage_channels and blocks_per_stage must have 4 entries")
        if any(b < 0 for b in self.blocks_per_stage):
            raise ValidationError(f"blocks_per_stage must be >= 0, got {self.blocks_per_stage}")
        if sum(self.blocks_per_stage) != self.residual_layers:
            raise ValidationError(
                f"blocks_per_stage {tuple(self.blocks_per_stage)} sums to {sum(self.blocks_per_stage)}, "
                f"expected residual_layers={self.residual_layers}"
            )
        if self.input_size <= 0 or self.input_size % 8:
            raise ValidationError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.width_multiplier <= 0:
            raise ValidationError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        return self

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(c * self.width_multiplier))) for c in self.stage_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FaeConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["blocks_per_stage"] = tuple(d["blocks_per_stage"])
        return cls(**d)


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with an identity skip: ``relu(x + conv2(relu(conv1(x))))``."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        return torch.relu(x + self.conv2(torch.relu(self.conv1(x))))


class Stage(nn.Module):
    def __init__(self, cin: int, cout: int, n_blocks: int, downsample: bool, stem: bool = False):
        super().__init__()
        self.pool = nn.MaxPool2d(2) if downsample else nn.Identity()
        convs = [conv3x3(cin, cout)]
        if stem:
            convs.append(conv3x3(cout, cout))
        self.convs = nn.ModuleList(convs)
        self.blocks = nn.ModuleList(ResBlock(cout) for _ in range(n_blocks))

    def forward(self, x):
        x = self.pool(x)
        for conv in self.convs:
            x = torch.relu(conv(x))
        for block in self.blocks:
            x = block(x)
        return x

    @property
    def last_conv(self) -> nn.Conv2d:
        return self.blocks[-1].conv2 if len(self.blocks) else self.convs[-1]


def he_init_(module: nn.Module, generator: torch.Generator, residual_scale: float = 1.0) -> None:
    """Fan-in He-normal weights, zero biases, in a fixed module order.

    The second convolution of every residual block is additionally scaled by
    ``residual_scale`` to keep deep unnormalised stacks bounded at init.
    """
    for name, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if name.endswith("conv2"):
                    m.weight.mul_(residual_scale)
                if m.bias is not None:
                    m.bias.zero_()


class FeatureAutoencoder(nn.Module):
    """Shared encoder; ``forward`` returns the four pyramid taps, finest first."""

    def __init__(self, cfg: FaeConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        nb = cfg.blocks_per_stage
        self.stages = nn.ModuleList(
            [Stage(1, ch[0], nb[0], downsample=False, stem=True)]
            + [Stage(ch[i - 1], ch[i], nb[i], downsample=True) for i in range(1, 4)]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, S, S) input, got {tuple(x.shape)}")
        if x.shape[-1] != self.cfg.input_size or x.shape[-2] != self.cfg.input_size:
            raise ShapeError(f"input side {tuple(x.shape[-2:])} does not match configured {self.cfg.input_size}")
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def deepest(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[-1]

    @property
    def last_shared_conv(self) -> nn.Conv2d:
        """The final convolution of the backbone (gradnorm measuring point)."""
        return self.stages[-1].last_conv


def build_fae(cfg: FaeConfig, seed: int) -> FeatureAutoencoder:
    cfg.validate()
    model = FeatureAutoencoder(cfg)
    n_blocks = max(sum(cfg.blocks_per_stage), 1)
    he_init_(model, torch_generator(seed), residual_scale=1.0 / math.sqrt(n_blocks))
    return model


def _as_image_tensor(image) -> torch.Tensor:
    if isinstance(image, Volume):
        if image.value_domain != "LAC":
            raise DomainError(f"extract_pyramid expects a LAC image, got {image.value_domain}")
        if image.shape[0] != 1:
            raise ShapeError(f"expected a single slice, got {image.shape[0]}")
        image = image.voxels[0]
    t = torch.as_tensor(np.asarray(image, dtype=np.float32)) if not torch.is_tensor(image) else image
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4 or t.shape[0] != 1 or t.shape[1] != 1:
        raise ShapeError(f"expected a single-channel 2D image, got shape {tuple(t.shape)}")
    return t.float()


def extract_pyramid(model: FeatureAutoencoder, image) -> list[torch.Tensor]:
    """The four ReLU-rectified taps for one image, each ``(C, H, W)``."""
    x = _as_image_tensor(image)
    with torch.no_grad():
        return [t[0] for t in model(x)]


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_fae(path: str | Path, model: FeatureAutoencoder, seed: int, extra: dict | None = None, heads: dict | None = None) -> Path:
    meta = {"kind": "fae", "fae_config": model.cfg.to_dict(), "seed": int(seed)}
    meta.update(extra or {})
    return save_checkpoint(path, {"fae": model, **(heads or {})}, meta)


def load_fae(path: str | Path) -> FeatureAutoencoder:
    header, arrays = read_checkpoint(path)
    if "fae_config" not in header:
        raise ValidationError(f"{path} holds no FAE")
    model = FeatureAutoencoder(FaeConfig.from_dict(header["fae_config"]))
    load_into(model, arrays, "fae")
    return model
