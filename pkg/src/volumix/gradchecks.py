"""Finite-difference gradient checks for every network block, in float64.

Each check reduces the block output to a scalar with a fixed random
projection and compares analytic and central-difference gradients at
sampled coordinates of the input and of every parameter tensor.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .blocks3d import GSC, BlockKind, TriOrientedMixer, TSBlock
from .rng import SplitMix64
from .segnet import DecoderBlock, SegConfig, SegNet, fue
from .tensor import Tensor

F64 = np.float64
BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3


def _sample(rng: SplitMix64, shape: tuple, n: int) -> list[tuple]:
    total = int(np.prod(shape))
    flat = rng.permutation(total)[:min(n, total)]
    return [np.unravel_index(int(i), shape) for i in flat]


def check(fn: Callable[[], Tensor], inputs: list[Tensor], module: nn.Module | None, rng: SplitMix64,
          n_coords: int = 6) -> float:
    """Max relative error over sampled coordinates of ``inputs`` and every parameter of ``module``."""
    targets = list(inputs) + (module.parameters() if module is not None else [])
    worst = 0.0
    for t in targets:
        was = t.requires_grad
        err = T.grad_check(lambda _x: fn(), t, eps=1e-6, indices=_sample(rng, t.shape, n_coords))
        t.requires_grad = was
        worst = max(worst, err)
    return worst


def _projected(out_fn: Callable[[], Tensor], rng: SplitMix64, shape: tuple) -> Callable[[], Tensor]:
    R = Tensor(rng.normal(shape))
    return lambda: T.tsum(out_fn() * R)


def jitter_biases(module: nn.Module, rng: SplitMix64, scale: float = 0.1):
    """Zero-initialised biases put ReLU inputs exactly on the kink; move them off it."""
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = p.data + scale * rng.normal(p.shape)


def _input(rng, shape):
    return Tensor(rng.normal(shape), requires_grad=True)


def check_gsc(seed=0):
    rng = SplitMix64(seed)
    m = GSC(rng.spawn(1), 4, F64)
    x = _input(rng, (4, 3, 3, 3))
    return check(_projected(lambda: m(x), rng, x.shape), [x], m, rng)


def check_tom(seed=0):
    rng = SplitMix64(seed)
    m = TriOrientedMixer(rng.spawn(1), 4, 2, F64, "ssm")
    x = _input(rng, (4, 3, 2, 4))
    return check(_projected(lambda: m(x), rng, x.shape), [x], m, rng)


def _tsblock(kind: BlockKind, seed=0, shifted=False):
    rng = SplitMix64(seed)
    m = TSBlock(rng.spawn(1), 4, kind, F64, state_dim=2, window=2, heads=2, shifted=shifted)
    x = _input(rng, (4, 3, 2, 4))
    return check(_projected(lambda: m(x), rng, x.shape), [x], m, rng)


def check_fue(seed=0):
    rng = SplitMix64(seed)
    x = _input(rng, (4, 3, 3, 3))
    return check(_projected(lambda: fue(x), rng, x.shape), [x], None, rng, n_coords=20)


def check_decoder(seed=0):
    rng = SplitMix64(seed)
    m = DecoderBlock(rng.spawn(1), 8, 4, F64)
    jitter_biases(m, rng)
    d = _input(rng, (8, 2, 2, 2))
    s = _input(rng, (4, 4, 4, 4))
    return check(_projected(lambda: m(d, s), rng, (4, 4, 4, 4)), [d, s], m, rng)


def small_model_config(variant="mambaout", seed=0) -> SegConfig:
    return SegConfig(variant=variant, stem_channels=4, channels=[4, 8], stage_depths=[1, 1], state_dim=2,
                     window=2, heads=2, precision="verify", seed=seed)


def check_loss_model(seed=0, variant="mambaout", size=8):
    from .trainer import loss

    rng = SplitMix64(seed)
    net = SegNet(small_model_config(variant, seed))
    jitter_biases(net, rng)
    x = _input(rng, (1, size, size, size))
    labels = rng.integers(0, 2, (size, size, size))
    return check(lambda: loss(net(x), labels), [x], net, rng, n_coords=3)


CHECKS = {
    "gsc": (check_gsc, BLOCK_TOL),
    "tom": (check_tom, BLOCK_TOL),
    "tsmamba": (lambda seed=0: _tsblock(BlockKind.TSMAMBA, seed), BLOCK_TOL),
    "tshydra": (lambda seed=0: _tsblock(BlockKind.TSHYDRA, seed), BLOCK_TOL),
    "mamba_swin": (lambda seed=0: _tsblock(BlockKind.MAMBA_SWIN, seed, shifted=True), BLOCK_TOL),
    "mambaout": (lambda seed=0: _tsblock(BlockKind.MAMBAOUT, seed), BLOCK_TOL),
    "fue": (check_fue, BLOCK_TOL),
    "decoder": (check_decoder, BLOCK_TOL),
    "loss_model": (check_loss_model, MODEL_TOL),
}


def run(names=None, seed: int = 0) -> dict[str, tuple[float, float]]:
    """name -> (max relative error, tolerance)."""
    names = list(CHECKS) if names in (None, "all", ["all"]) else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradcheck module(s) {unknown}; choose from {list(CHECKS)}")
    return {n: (CHECKS[n][0](seed=seed), CHECKS[n][1]) for n in names}
