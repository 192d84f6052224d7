"""Feature-to-feature perceptual loss: content and Gram-style terms over a feature pyramid.

Feature maps are ``(C, H, W)`` or batched ``(N, C, H, W)``; batched inputs
return the batch mean. Pyramid levels are ordered finest first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class CfpConfig:
    a: float = 0.5
    b: float = 0.5
    s1: int = 2
    s2: int = 4

    def validate(self) -> "CfpConfig":
        if self.a < 0 or self.b < 0:
            raise ValidationError(f"weights must be >= 0, got a={self.a}, b={self.b}")
        if not (1 <= self.s1 <= 4 and 1 <= self.s2 <= 4):
            raise ValidationError(f"level counts must be in 1..4, got s1={self.s1}, s2={self.s2}")
        return self


def _batched(phi: torch.Tensor) -> torch.Tensor:
    if phi.dim() == 3:
        return phi.unsqueeze(0)
    if phi.dim() != 4:
        raise ShapeError(f"feature map must be (C,H,W) or (N,C,H,W), got {tuple(phi.shape)}")
    return phi


def content_loss(phi_a: torch.Tensor, phi_b: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance divided by C*H*W."""
    if phi_a.shape != phi_b.shape:
        raise ShapeError(f"content_loss shape mismatch: {tuple(phi_a.shape)} vs {tuple(phi_b.shape)}")
    a, b = _batched(phi_a), _batched(phi_b)
    return (a - b).pow(2).flatten(1).mean(1).mean()


def gram(phi: torch.Tensor) -> torch.Tensor:
    """``G[c, c'] = sum_hw phi[c] phi[c'] / (C*H*W)``; batched input gives ``(N, C, C)``."""
    x = _batched(phi)
    n, c, h, w = x.shape
    f = x.reshape(n, c, h * w)
    g = f @ f.transpose(1, 2) / (c * h * w)
    return g[0] if phi.dim() == 3 else g


def style_loss(phi_a: torch.Tensor, phi_b: torch.Tensor) -> torch.Tensor:
    """``||gram(a) - gram(b)||_F^2``. Spatial sizes may differ; channels may not."""
    a, b = _batched(phi_a), _batched(phi_b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"style_loss channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"style_loss batch mismatch: {a.shape[0]} vs {b.shape[0]}")
    d = gram(a) - gram(b)
    return d.pow(2).sum(dim=(1, 2)).mean()


def cfp_loss(pyr_a: Sequence[torch.Tensor], pyr_b: Sequence[torch.Tensor], cfg: CfpConfig = CfpConfig()) -> torch.Tensor:
    """Weighted content terms over levels ``1..s1`` plus style terms over ``1..s2``."""
    cfg.validate()
    if len(pyr_a) != len(pyr_b):
        raise ShapeError(f"pyramids have {len(pyr_a)} and {len(pyr_b)} levels")
    if max(cfg.s1, cfg.s2) > len(pyr_a):
        raise ValidationError(f"config needs {max(cfg.s1, cfg.s2)} levels, pyramid has {len(pyr_a)}")
    content = sum(content_loss(pyr_a[i], pyr_b[i]) for i in range(cfg.s1))
    style = sum(style_loss(pyr_a[i], pyr_b[i]) for i in range(cfg.s2))
    return cfg.a / cfg.s1 * content + cfg.b / cfg.s2 * style
