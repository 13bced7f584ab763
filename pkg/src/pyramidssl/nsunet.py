"""Non-skip U-Net: encoder bottleneck plus a five-level decoded feature pyramid.

The decoder consumes only the bottleneck; each level upsamples the previous
one and refines it with two Conv-BN-ReLU blocks at a uniform channel width.
Skip connections exist solely as an ablation switch: when enabled, the
decoder additionally concatenates the equal-resolution encoder map wherever
one exists.

Spatial bookkeeping is exact for any input: the encoder records the size of
every stage (parameter-free downsampling never shrinks an axis below 1) and
the decoder upsamples back to those recorded sizes, so the finest level
always matches the input resolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelSection
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

NUM_LEVELS = 5

# Base channel schedules, scaled by encoder_width_multiplier (floor 1).
WIDTHS_2D = (64, 64, 128, 256, 512)  # stem, stage1..stage4
WIDTHS_3D = (8, 16, 32, 64, 128, 128)  # full-res stem + five pooled stages


def _scaled(widths, multiplier):
    return tuple(max(1, int(round(w * multiplier))) for w in widths)


def _conv_bn_relu(dim: int, cin: int, cout: int) -> nn.Sequential:
    conv = nn.Conv2d if dim == 2 else nn.Conv3d
    norm = nn.BatchNorm2d if dim == 2 else nn.BatchNorm3d
    return nn.Sequential(
        conv(cin, cout, kernel_size=3, padding=1, bias=False),
        norm(cout),
        nn.ReLU(inplace=True),
    )


class _DoubleConv(nn.Sequential):
    def __init__(self, dim, cin, cout):
        super().__init__(_conv_bn_relu(dim, cin, cout), _conv_bn_relu(dim, cout, cout))


class _BasicBlock2d(nn.Module):
    """Two 3x3 convs with identity shortcut, stride on the first conv."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


@dataclass
class EncoderOutput:
    """Bottleneck plus per-level skip taps and decoder target sizes."""

    bottleneck: torch.Tensor
    taps: list  # taps[i] feeds decoder level i+1; None where no equal-res map exists
    sizes: list  # sizes[i] is the spatial size decoder level i+1 upsamples to


class Encoder2d(nn.Module):
    """ResNet-18-style encoder: stem conv + maxpool + four 2-block stages."""

    def __init__(self, in_channels: int, multiplier: float = 1.0):
        super().__init__()
        w = _scaled(WIDTHS_2D, multiplier)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = nn.Sequential(_BasicBlock2d(w[0], w[1]), _BasicBlock2d(w[1], w[1]))
        self.layer2 = nn.Sequential(_BasicBlock2d(w[1], w[2], 2), _BasicBlock2d(w[2], w[2]))
        self.layer3 = nn.Sequential(_BasicBlock2d(w[2], w[3], 2), _BasicBlock2d(w[3], w[3]))
        self.layer4 = nn.Sequential(_BasicBlock2d(w[3], w[4], 2), _BasicBlock2d(w[4], w[4]))
        self.bottleneck_channels = w[4]
        # decoder levels 1..5 see: layer3, layer2, layer1, stem, nothing
        self.tap_channels = [w[3], w[2], w[1], w[0], 0]

    def forward(self, x) -> EncoderOutput:
        input_size = x.shape[2:]
        c1 = self.stem(x)
        l1 = self.layer1(self.pool(c1))
        l2 = self.layer2(l1)
        l3 = self.layer3(l2)
        l4 = self.layer4(l3)
        taps = [l3, l2, l1, c1, None]
        sizes = [l3.shape[2:], l2.shape[2:], l1.shape[2:], c1.shape[2:], input_size]
        return EncoderOutput(l4, taps, sizes)


class Encoder3d(nn.Module):
    """3D U-Net-style encoder: full-res stem, then five pool+double-conv stages.

    Pooling halves each axis independently and leaves axes of size 1 alone,
    so small inputs (e.g. 16^3 local views) pass through all five stages.
    """

    def __init__(self, in_channels: int, multiplier: float = 1.0):
        super().__init__()
        w = _scaled(WIDTHS_3D, multiplier)
        self.stem = _DoubleConv(3, in_channels, w[0])
        self.stages = nn.ModuleList(
            _DoubleConv(3, w[k], w[k + 1]) for k in range(NUM_LEVELS)
        )
        self.bottleneck_channels = w[NUM_LEVELS]
        # decoder levels 1..5 see: stage4, stage3, stage2, stage1, stem
        self.tap_channels = [w[4], w[3], w[2], w[1], w[0]]

    @staticmethod
    def _pool(x):
        kernel = tuple(2 if s >= 2 else 1 for s in x.shape[2:])
        if all(k == 1 for k in kernel):
            return x
        return F.max_pool3d(x, kernel_size=kernel, stride=kernel)

    def forward(self, x) -> EncoderOutput:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(self._pool(feats[-1])))
        taps = [feats[4], feats[3], feats[2], feats[1], feats[0]]
        sizes = [f.shape[2:] for f in taps]
        return EncoderOutput(feats[5], taps, sizes)


class _DecoderBlock(nn.Module):
    def __init__(self, dim, cin, skip_channels, cout, use_skip):
        super().__init__()
        self.use_skip = bool(use_skip) and skip_channels > 0
        total_in = cin + (skip_channels if self.use_skip else 0)
        self.convs = _DoubleConv(dim, total_in, cout)
        self.mode = "bilinear" if dim == 2 else "trilinear"

    def forward(self, x, skip, size):
        x = F.interpolate(x, size=tuple(size), mode=self.mode, align_corners=False)
        if self.use_skip:
            if skip is None:
                raise ShapeError("decoder level expects a skip tap but got none")
            x = torch.cat([x, skip], dim=1)
        return self.convs(x)


@dataclass
class FeaturePyramid:
    """Bottleneck plus decoded levels from coarsest (index 0) to full resolution."""

    bottleneck: torch.Tensor
    levels: list = field(default_factory=list)

    def level(self, index: int) -> torch.Tensor:
        """1-based scale index: level(1) is coarsest, level(5) full resolution."""
        if not 1 <= index <= len(self.levels):
            raise ShapeError(f"scale index {index} outside 1..{len(self.levels)}")
        return self.levels[index - 1]


class PyramidUNet(nn.Module):
    """Encoder + non-skip decoder producing a five-level feature pyramid."""

    def __init__(self, config: ModelSection):
        super().__init__()
        if config.dimensionality not in ("2d", "3d"):
            raise ConfigError(f"dimensionality must be '2d' or '3d', got {config.dimensionality!r}")
        self.config = config
        dim = 2 if config.dimensionality == "2d" else 3
        self.dim = dim
        if dim == 2:
            self.encoder = Encoder2d(config.in_channels, config.encoder_width_multiplier)
        else:
            self.encoder = Encoder3d(config.in_channels, config.encoder_width_multiplier)
        c = config.decoder_channels
        ins = [self.encoder.bottleneck_channels] + [c] * (NUM_LEVELS - 1)
        self.decoder = nn.ModuleList(
            _DecoderBlock(dim, ins[i], self.encoder.tap_channels[i], c, config.use_skip_connections)
            for i in range(NUM_LEVELS)
        )

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder.bottleneck_channels

    def encode(self, batch: torch.Tensor) -> EncoderOutput:
        if batch.ndim != self.dim + 2:
            raise ShapeError(
                f"expected {self.dim + 2}D batch for a {self.config.dimensionality} model, "
                f"got shape {tuple(batch.shape)}"
            )
        if batch.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} input channels, got {batch.shape[1]}"
            )
        return self.encoder(batch)

    def decode(self, bottleneck: torch.Tensor, taps, sizes) -> list:
        levels = []
        x = bottleneck
        for block, tap, size in zip(self.decoder, taps, sizes):
            x = block(x, tap, size)
            levels.append(x)
        return levels

    def forward_pyramid(self, batch: torch.Tensor) -> FeaturePyramid:
        enc = self.encode(batch)
        levels = self.decode(enc.bottleneck, enc.taps, enc.sizes)
        return FeaturePyramid(enc.bottleneck, levels)

    def forward(self, batch: torch.Tensor) -> FeaturePyramid:
        return self.forward_pyramid(batch)


def encoder_features(model: PyramidUNet, batch: torch.Tensor) -> torch.Tensor:
    """Bottleneck features only, for downstream fine-tuning."""
    return model.encode(batch).bottleneck


def _fan_in(tensor: torch.Tensor) -> int:
    if tensor.ndim < 2:
        return tensor.numel()
    receptive = 1
    for s in tensor.shape[2:]:
        receptive *= s
    return tensor.shape[1] * receptive


def init_parameters(module: nn.Module, seed: int) -> None:
    """He fan-in normal init for conv/linear weights, deterministic in `seed`."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            std = math.sqrt(2.0 / _fan_in(m.weight))
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    if isinstance(m, nn.Linear):
                        # small nonzero bias keeps tiny predictor MLPs away
                        # from exactly-zero outputs under BN+ReLU
                        bound = 1.0 / math.sqrt(_fan_in(m.weight))
                        m.bias.uniform_(-bound, bound, generator=gen)
                    else:
                        m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
            m.reset_running_stats()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build(config: ModelSection, seed: int = 0) -> PyramidUNet:
    """Construct and deterministically initialize the pyramid model."""
    model = PyramidUNet(config)
    init_parameters(model, seed)
    log.info(
        "built %s pyramid model: %d parameters (decoder width %d, skips %s)",
        config.dimensionality,
        count_parameters(model),
        config.decoder_channels,
        "on" if config.use_skip_connections else "off",
    )
    return model
