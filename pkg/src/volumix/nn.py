"""Parameter containers and the small layer set the blocks are built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_fan_in(rng: SplitMix64, shape: tuple, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(shape, -bound, bound), dtype)


class Module:
    """Base class: parameters are Tensor attributes with ``requires_grad``;
    children are Module attributes or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{n}: checkpoint shape {arr.shape} vs model shape {p.shape}")
            p.data = arr.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng: SplitMix64, n_in: int, n_out: int, dtype, bias: bool = True):
        self.weight = uniform_fan_in(rng, (n_out, n_in), n_in, dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, rng: SplitMix64, c_in: int, c_out: int, kernel: int, dtype, stride=1, padding=0,
                 groups: int = 1, bias: bool = True):
        k = T._triple(kernel)
        fan_in = (c_in // groups) * k[0] * k[1] * k[2]
        self.weight = uniform_fan_in(rng, (c_out, c_in // groups) + k, fan_in, dtype)
        self.bias = param(np.zeros(c_out), dtype) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups
        self.c_in = c_in

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.c_in:
            raise T.ShapeError(f"channel mismatch: input {x.shape} vs layer expecting {self.c_in} channels")
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose3d(Module):
    def __init__(self, rng: SplitMix64, c_in: int, c_out: int, kernel: int, dtype, stride=2, padding=0,
                 output_padding=0):
        k = T._triple(kernel)
        fan_in = c_in * k[0] * k[1] * k[2]
        self.weight = uniform_fan_in(rng, (c_in, c_out) + k, fan_in, dtype)
        self.bias = param(np.zeros(c_out), dtype)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose3d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class LayerNorm(Module):
    """Channel-axis layer norm (axis 0 for (C, D, H, W) maps, -1 for token rows)."""

    def __init__(self, channels: int, dtype, axis: int = 0):
        self.weight = param(np.ones(channels), dtype)
        self.bias = param(np.zeros(channels), dtype)
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, axis=self.axis)


class InstanceNorm(Module):
    def __init__(self, channels: int, dtype):
        self.weight = param(np.ones(channels), dtype)
        self.bias = param(np.zeros(channels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.weight, self.bias)


def zero_non_norm(module: Module):
    """Zero every parameter that is not a normalisation affine (test helper for residual paths)."""
    norm_ids = set()

    def collect(m):
        for val in vars(m).values():
            if isinstance(val, (LayerNorm, InstanceNorm)):
                norm_ids.update({id(val.weight), id(val.bias)})
            elif isinstance(val, Module):
                collect(val)
            elif isinstance(val, (list, tuple)):
                for it in val:
                    if isinstance(it, Module):
                        collect(it)

    collect(module)
    for p in module.parameters():
        if id(p) not in norm_ids:
            p.data[...] = 0
