"""Data-fidelity objective: pixel MSE plus a weighted perceptual term.

The perceptual distance has the usual learned-feature shape (multi-level
conv features, channel-unit-normalized, squared differences averaged per
level and summed) but runs on a frozen, seeded random-convolution pyramid
instead of a pretrained classifier. An external backbone with the same
``features`` interface can be plugged in for parity experiments.
"""

import numpy as np
import torch
from torch import nn

from .errors import DimensionError


class RandomFeaturePyramid:
    """Frozen random conv features at several scales; weights are seeded and
    kept in float64 so the backbone can follow the input dtype."""

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64), seed: int = 902113):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = in_channels
        for c_out in widths:
            fan_in = c_in * 9
            w = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / fan_in)
            self.weights.append(torch.from_numpy(w))
            c_in = c_out

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for i, w in enumerate(self.weights):
            h = nn.functional.conv2d(h, w.to(dtype=x.dtype), padding=1)
            h = nn.functional.silu(h)
            feats.append(h)
            if i + 1 < len(self.weights):
                h = nn.functional.avg_pool2d(h, 2)
        return feats


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    return f / torch.sqrt(torch.sum(f**2, dim=1, keepdim=True) + 1e-10)


def _as_batched(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise DimensionError(f"expected [B, C, H, W] or [C, H, W], got {tuple(t.shape)}")
    return t


def perceptual_distance(a, b, backbone: RandomFeaturePyramid) -> torch.Tensor:
    """Symmetric feature-space distance; zero iff the feature maps agree."""
    a, b = _as_batched(a), _as_batched(b)
    if a.shape != b.shape:
        raise DimensionError(f"perceptual_distance: shape mismatch {a.shape} vs {b.shape}")
    total = a.new_zeros(())
    for fa, fb in zip(backbone.features(a), backbone.features(b)):
        total = total + torch.mean((_unit_normalize(fa) - _unit_normalize(fb)) ** 2)
    return total


class DataLossConfig:
    def __init__(self, lambda1: float = 2.0, backbone: RandomFeaturePyramid | None = None):
        if lambda1 < 0:
            raise DimensionError(f"lambda1 must be >= 0, got {lambda1}")
        self.lambda1 = lambda1
        self.backbone = backbone or RandomFeaturePyramid()


def data_loss(x_hat, x_ref, cfg: DataLossConfig) -> tuple[torch.Tensor, dict]:
    """MSE(x_hat, x_ref) + lambda1 * perceptual(x_hat, x_ref); differentiable in x_hat."""
    x_hat, x_ref = _as_batched(x_hat), _as_batched(x_ref)
    if x_hat.shape != x_ref.shape:
        raise DimensionError(f"data_loss: shape mismatch {x_hat.shape} vs {x_ref.shape}")
    mse = torch.mean((x_hat - x_ref) ** 2)
    if cfg.lambda1 > 0:
        perc = perceptual_distance(x_hat, x_ref, cfg.backbone)
    else:
        perc = x_hat.new_zeros(())
    total = mse + cfg.lambda1 * perc
    return total, {"mse": float(mse.detach()), "perceptual": float(perc.detach())}
