"""Self-supervised heads for the feature pyramid.

One lightweight restoration head per pyramid level maps decoder features back
to image space; a single comparison head (shared across levels and both
branches) turns feature maps into embedding vectors and runs the prediction
MLP for the asymmetric cosine objective.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelSection
from .errors import ShapeError
from .nsunet import NUM_LEVELS, _conv_bn_relu, init_parameters


class RestorationHead(nn.Module):
    """Conv-BN-ReLU then a linear conv to image channels; output is resized
    to the restoration target with parameter-free interpolation."""

    def __init__(self, dim: int, channels: int, out_channels: int):
        super().__init__()
        conv = nn.Conv2d if dim == 2 else nn.Conv3d
        self.dim = dim
        self.channels = channels
        self.refine = _conv_bn_relu(dim, channels, channels)
        self.project = conv(channels, out_channels, kernel_size=3, padding=1)

    def forward(self, features: torch.Tensor, target_size: Sequence[int]) -> torch.Tensor:
        if features.shape[1] != self.channels:
            raise ShapeError(
                f"restoration head expects {self.channels} channels, got {features.shape[1]}"
            )
        x = self.project(self.refine(features))
        target = tuple(int(t) for t in target_size)
        if tuple(x.shape[2:]) != target:
            mode = "bilinear" if self.dim == 2 else "trilinear"
            x = F.interpolate(x, size=target, mode=mode, align_corners=False)
        return x


class ComparisonHead(nn.Module):
    """Shared embedding normalizer plus the two-layer prediction MLP.

    embed: global-average-pool the feature map, then batch-normalize the
    pooled vector (affine, statistics shared across every caller).
    predict: Linear -> BN -> ReLU -> Linear with a halved hidden width.
    """

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        self.channels = channels
        hidden = hidden or max(1, channels // 2)
        self.embed_bn = nn.BatchNorm1d(channels)
        self.predictor = nn.Sequential(
            nn.Linear(channels, hidden, bias=False),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )

    def gap(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim < 3:
            raise ShapeError(f"expected a (B, C, spatial...) map, got {tuple(features.shape)}")
        return features.mean(dim=tuple(range(2, features.ndim)))

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.channels:
            raise ShapeError(
                f"comparison head expects {self.channels} channels, got {features.shape[1]}"
            )
        return self.embed_bn(self.gap(features))

    def predict(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.channels:
            raise ShapeError(f"predictor expects width {self.channels}, got {v.shape[-1]}")
        return self.predictor(v)


class SslHeads(nn.Module):
    """Container: restore["1"].."5"] plus the shared compare head."""

    def __init__(self, config: ModelSection):
        super().__init__()
        dim = 2 if config.dimensionality == "2d" else 3
        c = config.decoder_channels
        self.restore = nn.ModuleDict(
            {str(i): RestorationHead(dim, c, config.in_channels) for i in range(1, NUM_LEVELS + 1)}
        )
        self.compare = ComparisonHead(c)

    def restoration(self, scale: int) -> RestorationHead:
        key = str(scale)
        if key not in self.restore:
            raise ShapeError(f"no restoration head for scale {scale}")
        return self.restore[key]


def build_heads(config: ModelSection, seed: int = 0) -> SslHeads:
    heads = SslHeads(config)
    init_parameters(heads, seed)
    return heads
