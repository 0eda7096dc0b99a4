"""Parameter containers and the convolution layers built from ``volume_ops``."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import volume_ops as vo
from .tensor import Tensor, scope


class Module:
    """Base class holding named parameters and child modules.

    Calling a module runs ``forward`` inside a MAC-counter scope named after
    the module's attribute path, so instrumented counts group per layer.
    """

    name = ""

    def __call__(self, *args, **kwargs):
        with scope(self.name.rsplit(".", 1)[-1] if self.name else ""):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, p in self.own_parameters():
            yield prefix + key, p
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, child in self.children():
            yield from child.named_modules(f"{prefix}{key}.")

    def assign_names(self, prefix: str = "") -> None:
        for path, mod in self.named_modules(prefix):
            mod.name = path

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for 64-bit gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self.modules():
            for key, val in vars(mod).items():
                if isinstance(val, Tensor) and not val.requires_grad:
                    val.data = val.data.astype(dtype)
        return self

    def modules(self) -> list["Module"]:
        return [m for _, m in self.named_modules()]


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


class Conv(Module):
    """Dense same-padded convolution with a fixed footprint.

    ``kind`` is one of ``inplane`` (1xkxk), ``throughplane`` (kx1x1),
    ``pointwise`` (1x1x1) or ``full3d`` (kxkxk).
    """

    _shapes = {
        "inplane": lambda k: (1, k, k),
        "throughplane": lambda k: (k, 1, 1),
        "pointwise": lambda k: (1, 1, 1),
        "full3d": lambda k: (k, k, k),
    }

    def __init__(self, c_in: int, c_out: int, kind: str, rng: np.random.Generator, k: int = 3, bias: bool = True):
        if kind not in self._shapes:
            raise ValueError(f"unknown convolution kind {kind!r}")
        self.kind = kind
        self.c_in, self.c_out = c_in, c_out
        footprint = self._shapes[kind](k)
        self.k = 1 if kind == "pointwise" else k
        fan_in = c_in * int(np.prod(footprint))
        self.weight = he_uniform(rng, (c_out, c_in) + footprint, fan_in)
        self.bias = zeros_param((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "inplane":
            return vo.conv_inplane(x, self.weight, self.bias)
        if self.kind == "throughplane":
            return vo.conv_throughplane(x, self.weight, self.bias)
        if self.kind == "pointwise":
            return vo.conv_pointwise(x, self.weight, self.bias)
        return vo.conv3d(x, self.weight, self.bias)


class DepthwiseConv(Module):
    """Per-channel ``k x k`` (2D maps) or ``k`` (1D sequences) convolution."""

    def __init__(self, channels: int, ndim: int, rng: np.random.Generator, k: int = 3, bias: bool = True):
        self.ndim = ndim
        self.channels = channels
        self.k = k
        self.weight = he_uniform(rng, (channels,) + (k,) * ndim, k**ndim)
        self.bias = zeros_param((channels,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if self.ndim == 2:
            return vo.dwconv2d(x, self.weight, self.bias)
        return vo.dwconv1d(x, self.weight, self.bias)


class Pointwise(Module):
    """1x1 channel mixing for maps of any rank (used on pooled 2D/1D inputs)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.c_in, self.c_out = c_in, c_out
        self.weight = he_uniform(rng, (c_out, c_in), c_in)
        self.bias: Optional[Tensor] = zeros_param((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return vo.conv_pointwise(x, self.weight, self.bias)
