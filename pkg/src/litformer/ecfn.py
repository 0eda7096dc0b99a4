"""Efficient convolutional feed-forward network built from (2+1)D units."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv, Module
from .tensor import ConfigError, DimensionError, Tensor

FUSIONS = ("parallel", "cascaded", "full3d")


@dataclass
class EcfnConfig:
    # "full3d" swaps the factorized pair for one kxkxk kernel (3D baseline row of the ablation).
    fusion: str = "parallel"
    activation: bool = True
    kernel: int = 3

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigError(f"eCFN fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"eCFN kernel must be odd, got {self.kernel}")


class EcfnUnit(Module):
    """One (2+1)D unit plus its identity / 1x1x1 projection path.

    parallel:  ConvI(x) + ConvT(x) + IM(x)
    cascaded:  ConvT(ConvI(x)) + IM(x)
    full3d:    Conv3D(x) + IM(x)
    """

    def __init__(self, c_in: int, c_out: int, cfg: EcfnConfig, rng: np.random.Generator):
        cfg.validate()
        self.c_in, self.c_out = c_in, c_out
        self.fusion = cfg.fusion
        k = cfg.kernel
        if cfg.fusion == "full3d":
            self.conv3 = Conv(c_in, c_out, "full3d", rng, k)
        else:
            self.conv_i = Conv(c_in, c_out, "inplane", rng, k)
            t_in = c_out if cfg.fusion == "cascaded" else c_in
            self.conv_t = Conv(t_in, c_out, "throughplane", rng, k)
        self.proj = Conv(c_in, c_out, "pointwise", rng) if c_in != c_out else None

    def identity_path(self, x: Tensor) -> Tensor:
        return x if self.proj is None else self.proj(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise DimensionError(f"eCFN unit expects {self.c_in} channels, got {x.shape[1]}")
        if self.fusion == "parallel":
            return T.add(T.add(self.conv_i(x), self.conv_t(x)), self.identity_path(x))
        if self.fusion == "cascaded":
            return T.add(self.conv_t(self.conv_i(x)), self.identity_path(x))
        return T.add(self.conv3(x), self.identity_path(x))

    def kernels(self) -> list[Conv]:
        return [m for m in (getattr(self, n, None) for n in ("conv_i", "conv_t", "conv3")) if m is not None]


class ECFN(Module):
    """unit1 (channel-preserving) -> GELU -> unit2 (``c_in -> c_out``)."""

    def __init__(self, c_in: int, c_out: int, cfg: EcfnConfig, rng: np.random.Generator):
        self.c_in, self.c_out = c_in, c_out
        self.activation = cfg.activation
        self.unit1 = EcfnUnit(c_in, c_in, cfg, rng)
        self.unit2 = EcfnUnit(c_in, c_out, cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.unit1(x)
        if self.activation:
            y = T.gelu(y)
        return self.unit2(y)
