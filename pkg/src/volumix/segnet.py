"""Shared encoder-decoder: stem, four encoder stages of one block kind,
uncertainty-weighted skips (FUE), convolutional decoder and class head."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .blocks3d import BlockKind, TSBlock
from .rng import SplitMix64
from .tensor import Precision, Tensor


@dataclass
class SegConfig:
    variant: BlockKind = BlockKind.MAMBAOUT
    in_channels: int = 1
    num_classes: int = 2
    stem_channels: int = 48
    stage_depths: list = field(default_factory=lambda: [1, 1, 1, 1])
    channels: list = field(default_factory=lambda: [48, 96, 192, 384])
    state_dim: int = 4
    window: int = 4
    heads: int = 4
    precision: Precision = Precision.TRAIN
    seed: int = 0

    def __post_init__(self):
        self.variant = BlockKind.parse(self.variant)
        self.precision = Precision.parse(self.precision)
        self.stage_depths = [int(v) for v in self.stage_depths]
        self.channels = [int(v) for v in self.channels]

    def validate(self):
        ch = self.channels
        if len(ch) < 1 or len(self.stage_depths) != len(ch):
            raise ValueError(f"invalid schedule: channels {ch} vs depths {self.stage_depths}")
        if any(b != 2 * a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"invalid schedule: channels must double per stage, got {ch}")
        if self.stem_channels != ch[0]:
            raise ValueError(f"invalid schedule: stem_channels {self.stem_channels} != channels[0] {ch[0]}")
        if any(d < 1 for d in self.stage_depths):
            raise ValueError(f"invalid schedule: depths must be >= 1, got {self.stage_depths}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("in_channels must be >= 1 and num_classes >= 2")
        if self.variant is BlockKind.MAMBA_SWIN and any(c % self.heads for c in ch):
            raise ValueError(f"heads ({self.heads}) must divide every stage width {ch}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.channels)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["precision"] = self.precision.value
        return d


class Stem(nn.Module):
    """Depthwise 7³ stride-2 conv, then a pointwise conv to the stem width."""

    def __init__(self, rng: SplitMix64, c_in: int, c_out: int, dtype):
        self.dw = nn.Conv3d(rng, c_in, c_in, 7, dtype, stride=2, padding=3, groups=c_in)
        self.pw = nn.Conv3d(rng, c_in, c_out, 1, dtype)

    def forward(self, v: Tensor) -> Tensor:
        if any(n % 2 for n in v.shape[1:]):
            raise T.ShapeError(f"encoder stem needs even spatial extents, got {v.shape}")
        return self.pw(self.dw(v))


def encoder_stem(v: Tensor, params: Stem) -> Tensor:
    return params(v)


def fue(x: Tensor) -> Tensor:
    """x * (2 - u) with u = -x̄ ln x̄ and x̄ = sigmoid(channel mean); parameter-free."""
    xbar = T.sigmoid(T.mean(x, axis=0, keepdims=True))
    u = T.neg(xbar * T.log(xbar))
    return x * (2.0 - u)


class DecoderBlock(nn.Module):
    """ReLU(InstanceNorm(Conv3(ConvT(d_prev) ⊕ FUE(skip))))."""

    def __init__(self, rng: SplitMix64, c_prev: int, c_out: int, dtype):
        self.up = nn.ConvTranspose3d(rng, c_prev, c_out, 3, dtype, stride=2, padding=1, output_padding=1)
        self.conv = nn.Conv3d(rng, 2 * c_out, c_out, 3, dtype, padding=1)
        self.norm = nn.InstanceNorm(c_out, dtype)

    def forward(self, d_prev: Tensor, skip: Tensor) -> Tensor:
        up = self.up(d_prev)
        if up.shape[1:] != skip.shape[1:]:
            raise T.ShapeError(f"spatial mismatch after ConvT: upsampled {up.shape} vs skip {skip.shape}")
        return T.relu(self.norm(self.conv(T.concat([up, fue(skip)], axis=0))))


def decoder_block(d_prev: Tensor, skip: Tensor, params: DecoderBlock) -> Tensor:
    return params(d_prev, skip)


class Stage(nn.Module):
    def __init__(self, rng, c, depth, cfg: SegConfig, dtype, c_next=None):
        self.blocks = [TSBlock(rng, c, cfg.variant, dtype, cfg.state_dim, cfg.window, cfg.heads,
                               shifted=bool(i % 2)) for i in range(depth)]
        self.down = nn.Conv3d(rng, c, c_next, 2, dtype, stride=2) if c_next else None

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class SegNet(nn.Module):
    def __init__(self, cfg: SegConfig):
        cfg.validate()
        self.cfg = cfg
        dtype = cfg.precision.dtype
        rng = SplitMix64(cfg.seed)
        ch = cfg.channels
        self.stem = Stem(rng.spawn(0), cfg.in_channels, cfg.stem_channels, dtype)
        self.stages = [Stage(rng.spawn(10 + i), c, cfg.stage_depths[i], cfg, dtype,
                             ch[i + 1] if i + 1 < len(ch) else None) for i, c in enumerate(ch)]
        drng = rng.spawn(100)
        self.decoders = [DecoderBlock(drng, ch[i + 1], ch[i], dtype) for i in reversed(range(len(ch) - 1))]
        self.final_up = nn.ConvTranspose3d(drng, ch[0], ch[0], 3, dtype, stride=2, padding=1, output_padding=1)
        self.head = nn.Conv3d(drng, ch[0], cfg.num_classes, 1, dtype)

    @property
    def dtype(self):
        return self.cfg.precision.dtype

    def encode(self, v: Tensor) -> list:
        x = self.stem(v)
        skips = []
        for st in self.stages:
            x = st(x)
            skips.append(x)
            if st.down is not None:
                x = st.down(x)
        return skips

    def forward(self, v) -> Tensor:
        v = T.as_tensor(v)
        if v.dtype != self.dtype:
            v = T.as_tensor(v.data.astype(self.dtype))
        f = self.cfg.downsample_factor
        if v.ndim != 4 or v.shape[0] != self.cfg.in_channels or any(n % f for n in v.shape[1:]):
            raise T.ShapeError(
                f"input {v.shape} must be ({self.cfg.in_channels}, D, H, W) with extents divisible by {f}")
        skips = self.encode(v)
        d = skips[-1]
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            d = dec(d, skip)
        d = T.relu(self.final_up(d))
        return self.head(d)


def build_model(cfg: SegConfig) -> tuple[SegNet, int]:
    net = SegNet(cfg)
    return net, net.num_parameters()
