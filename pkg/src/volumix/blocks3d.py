"""Encoder blocks on (C, D, H, W) feature maps.

GSC gating, tri-oriented sequence mixing, windowed attention and the four
block kinds (TSMamba, TSHydra, MambaSwin, MambaOut) that share one
GSC -> token mixer -> MLP flow.
"""
from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .rng import SplitMix64
from .seqmix import SequenceMixerBlock, gated_cnn_mix
from .tensor import Tensor


class BlockKind(enum.Enum):
    TSMAMBA = "tsmamba"
    TSHYDRA = "tshydra"
    MAMBA_SWIN = "mamba_swin"
    MAMBAOUT = "mambaout"

    @classmethod
    def parse(cls, value) -> "BlockKind":
        if isinstance(value, BlockKind):
            return value
        v = str(value).lower().replace("-", "_")
        aliases = {"segmamba": "tsmamba", "seghydra": "tshydra", "vismix": "mamba_swin",
                   "mambaswin": "mamba_swin", "mambaoutunet": "mambaout"}
        return cls(aliases.get(v, v))


# ---------------------------------------------------------------------------
# token views of a feature map


def to_tokens(x: Tensor) -> Tensor:
    """(C, D, H, W) -> (D*H*W, C), D-major."""
    C = x.shape[0]
    return T.reshape(T.permute(x, (1, 2, 3, 0)), (-1, C))


def from_tokens(t: Tensor, spatial: tuple) -> Tensor:
    C = t.shape[1]
    return T.permute(T.reshape(t, tuple(spatial) + (C,)), (3, 0, 1, 2))


def channel_linear(x: Tensor, layer: nn.Linear) -> Tensor:
    return from_tokens(layer(to_tokens(x)), x.shape[1:])


# axial: D-major, coronal: H-major, sagittal: W-major (cyclic axis orders)
ORIENTATIONS = {"axial": (1, 2, 3), "coronal": (2, 3, 1), "sagittal": (3, 1, 2)}


def flatten_orientation(x: Tensor, orientation: str) -> Tensor:
    order = ORIENTATIONS[orientation]
    C = x.shape[0]
    return T.reshape(T.permute(x, order + (0,)), (-1, C))


def unflatten_orientation(seq: Tensor, orientation: str, spatial: tuple) -> Tensor:
    order = ORIENTATIONS[orientation]
    ext = tuple(spatial[a - 1] for a in order)
    C = seq.shape[1]
    v = T.reshape(seq, ext + (C,))
    perm = order + (0,)
    inv = tuple(int(i) for i in np.argsort(perm))
    return T.permute(v, inv)


def tri_oriented_mix(x: Tensor, mixer: Callable, params: Sequence) -> Tensor:
    """Sum of ``mixer(sequence, params[k])`` over the axial, coronal and
    sagittal flattenings, each un-flattened back to (C, D, H, W)."""
    if len(params) != 3:
        raise ValueError(f"mixer/params mismatch: need 3 per-orientation parameter sets, got {len(params)}")
    spatial = x.shape[1:]
    out = None
    for name, p in zip(ORIENTATIONS, params):
        seq = flatten_orientation(x, name)
        y = mixer(seq, p)
        if y.shape != seq.shape:
            raise T.ShapeError(f"mixer/params mismatch: mixer returned {y.shape} for sequence {seq.shape}")
        y = unflatten_orientation(y, name, spatial)
        out = y if out is None else out + y
    return out


# ---------------------------------------------------------------------------
# building blocks


class ConvBlock(nn.Module):
    """norm -> conv -> ReLU."""

    def __init__(self, rng: SplitMix64, c: int, kernel: int, dtype):
        self.norm = nn.InstanceNorm(c, dtype)
        self.conv = nn.Conv3d(rng, c, c, kernel, dtype, padding=kernel // 2)

    def forward(self, x):
        return T.relu(self.conv(self.norm(x)))


class GSC(nn.Module):
    """x + outer(proj3(x) * proj1(x))."""

    def __init__(self, rng: SplitMix64, c: int, dtype):
        self.proj3 = ConvBlock(rng, c, 3, dtype)
        self.proj1 = ConvBlock(rng, c, 1, dtype)
        self.outer = ConvBlock(rng, c, 3, dtype)
        self.c = c

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.c:
            raise T.ShapeError(f"channel mismatch: input {x.shape} vs GSC width {self.c}")
        return x + self.outer(self.proj3(x) * self.proj1(x))


def gsc(x: Tensor, params: GSC) -> Tensor:
    return params(x)


class MLP(nn.Module):
    def __init__(self, rng: SplitMix64, c: int, dtype, ratio: int = 2):
        self.fc1 = nn.Linear(rng, c, ratio * c, dtype)
        self.fc2 = nn.Linear(rng, ratio * c, c, dtype)

    def forward(self, x: Tensor) -> Tensor:
        t = to_tokens(x)
        return from_tokens(self.fc2(T.silu(self.fc1(t))), x.shape[1:])


class TriOrientedMixer(nn.Module):
    """Three independent sequence mixers, one per orientation."""

    def __init__(self, rng: SplitMix64, c: int, state_dim: int, dtype, kind: str = "ssm"):
        self.mixers = [SequenceMixerBlock(rng, c, state_dim, dtype, kind) for _ in ORIENTATIONS]

    def forward(self, x: Tensor) -> Tensor:
        return tri_oriented_mix(x, lambda seq, m: m(seq), self.mixers)


class GatedCNN(nn.Module):
    """Split-gate token mixer: out_proj(silu(gate) ⊙ dwconv7(value))."""

    def __init__(self, rng: SplitMix64, c: int, dtype):
        self.in_proj = nn.Linear(rng, c, 2 * c, dtype)
        self.conv_weight = nn.uniform_fan_in(rng, (c, 1, 7, 7, 7), 343, dtype)
        self.conv_bias = nn.param(np.zeros(c), dtype)
        self.out_proj = nn.Linear(rng, c, c, dtype)
        self.c = c

    def forward(self, x: Tensor) -> Tensor:
        c = self.c
        z = channel_linear(x, self.in_proj)
        gate, value = z[:c], z[c:]
        mixed = gated_cnn_mix(value, self.conv_weight, self.conv_bias)
        return channel_linear(T.silu(gate) * mixed, self.out_proj)


# ---------------------------------------------------------------------------
# windowed attention


class WindowAttention(nn.Module):
    def __init__(self, rng: SplitMix64, c: int, dtype, window: int = 4, heads: int = 4):
        if c % heads:
            raise ValueError(f"heads ({heads}) must divide channels ({c})")
        self.qkv = nn.Linear(rng, c, 3 * c, dtype)
        self.proj = nn.Linear(rng, c, c, dtype)
        self.window, self.heads = window, heads

    def forward(self, x: Tensor, shifted: bool = False) -> Tensor:
        return windowed_attention(x, self.window, self.heads, shifted, self)


def windowed_attention(x: Tensor, window: int, heads: int, shifted: bool, params: WindowAttention,
                       return_weights: bool = False):
    """Multi-head softmax attention inside non-overlapping window³ cubes.

    Extents that are not multiples of ``window`` are zero-padded; padded
    tokens are masked out as keys and cropped from the output.  With
    ``shifted`` the volume is cyclically rolled by window // 2 first.
    """
    C, D, H, W = x.shape
    if C % heads:
        raise ValueError(f"heads ({heads}) must divide channels ({C})")
    w = window
    pads = [(0, (-n) % w) for n in (D, H, W)]
    Dp, Hp, Wp = (n + p[1] for n, p in zip((D, H, W), pads))
    t = T.permute(x, (1, 2, 3, 0))  # (D, H, W, C)
    valid = np.zeros((Dp, Hp, Wp), dtype=bool)
    valid[:D, :H, :W] = True
    if any(p[1] for p in pads):
        t = T.pad(t, pads + [(0, 0)])
    s = w // 2 if shifted else 0
    if s:
        t = T.roll(t, (-s, -s, -s), (0, 1, 2))
        valid = np.roll(valid, (-s, -s, -s), (0, 1, 2))
    nd, nh, nw = Dp // w, Hp // w, Wp // w
    nW, n = nd * nh * nw, w ** 3

    def partition(v):
        v = T.reshape(v, (nd, w, nh, w, nw, w, -1))
        v = T.permute(v, (0, 2, 4, 1, 3, 5, 6))
        return T.reshape(v, (nW, n, -1))

    win = partition(t)  # (nW, n, C)
    keymask = valid.reshape(nd, w, nh, w, nw, w).transpose(0, 2, 4, 1, 3, 5).reshape(nW, 1, 1, n)
    hd = C // heads
    qkv = params.qkv(win)  # (nW, n, 3C)
    qkv = T.permute(T.reshape(qkv, (nW, n, 3, heads, hd)), (2, 0, 3, 1, 4))  # (3, nW, heads, n, hd)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.permute(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    if not keymask.all():
        scores = scores + np.where(keymask, 0.0, -1e9).astype(x.dtype)
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)  # (nW, heads, n, hd)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (nW, n, C))
    out = params.proj(out)
    out = T.reshape(out, (nd, nh, nw, w, w, w, C))
    out = T.reshape(T.permute(out, (0, 3, 1, 4, 2, 5, 6)), (Dp, Hp, Wp, C))
    if s:
        out = T.roll(out, (s, s, s), (0, 1, 2))
    if any(p[1] for p in pads):
        out = out[:D, :H, :W]
    out = T.permute(out, (3, 0, 1, 2))
    if return_weights:
        return out, attn
    return out


# ---------------------------------------------------------------------------
# block kinds


class MambaSwin(nn.Module):
    """x + Swin(LN(ToM(LN(x))))."""

    def __init__(self, rng: SplitMix64, c: int, state_dim: int, dtype, window: int, heads: int):
        self.norm_in = nn.LayerNorm(c, dtype)
        self.tom = TriOrientedMixer(rng, c, state_dim, dtype, "ssm")
        self.norm_mid = nn.LayerNorm(c, dtype)
        self.attn = WindowAttention(rng, c, dtype, window, heads)

    def forward(self, x: Tensor, shifted: bool = False) -> Tensor:
        m = self.tom(self.norm_in(x))
        return self.attn(self.norm_mid(m), shifted) + x


def mamba_swin_block(x: Tensor, params: MambaSwin, shifted: bool = False) -> Tensor:
    return params(x, shifted)


class TSBlock(nn.Module):
    """x̂ = GSC(x); x̃ = mixer(LN(x̂)) + x̂; out = MLP(LN(x̃)) + x̃.

    The mixer is tri-oriented selective SSM (TSMamba), tri-oriented
    quasiseparable (TSHydra) or the gated CNN (MambaOut).  For MambaSwin the
    middle step is the Mamba-then-windowed-attention residual block.
    """

    def __init__(self, rng: SplitMix64, c: int, kind: BlockKind, dtype, state_dim: int = 4, window: int = 4,
                 heads: int = 4, shifted: bool = False):
        self.kind = BlockKind.parse(kind)
        self.shifted = shifted
        self.gsc = GSC(rng, c, dtype)
        if self.kind is BlockKind.MAMBA_SWIN:
            self.mix = MambaSwin(rng, c, state_dim, dtype, window, heads)
        else:
            self.norm1 = nn.LayerNorm(c, dtype)
            if self.kind is BlockKind.TSMAMBA:
                self.mix = TriOrientedMixer(rng, c, state_dim, dtype, "ssm")
            elif self.kind is BlockKind.TSHYDRA:
                self.mix = TriOrientedMixer(rng, c, state_dim, dtype, "quasi")
            else:
                self.mix = GatedCNN(rng, c, dtype)
        self.norm2 = nn.LayerNorm(c, dtype)
        self.mlp = MLP(rng, c, dtype)

    def forward(self, x: Tensor) -> Tensor:
        xh = self.gsc(x)
        if self.kind is BlockKind.MAMBA_SWIN:
            xt = self.mix(xh, self.shifted)
        else:
            xt = self.mix(self.norm1(xh)) + xh
        return self.mlp(self.norm2(xt)) + xt


def tsblock(x: Tensor, kind: BlockKind, params: TSBlock) -> Tensor:
    if BlockKind.parse(kind) is not params.kind:
        raise ValueError(f"block kind {kind} does not match parameters built for {params.kind}")
    return params(x)
