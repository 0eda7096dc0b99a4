"""LIT-Former assembly: U-shaped encoder/decoder of LIT blocks.

Layout for ``levels = L`` and base width ``C`` (level ``l`` has ``C * 2**(l-1)``
channels)::

    stem eCFN (1 -> C)                                     F0
    enc[l]: [maxpool if l > 1] -> eMSM(c_{l-1}) -> eCFN(c_{l-1} -> c_l)
    dec[l], l = L-1 .. 1:
        upsample_transverse -> 1x1x1 reduce (c_{l+1} -> c_l)
        -> eMSM(c_l) -> eCFN(c_l -> c_l) -> + enc[l] output
    refine eCFN (C -> C) + F0                              F_DF
    upsample_depth(r) -> head eCFN (C -> 1)

Only the transverse axes are resampled inside the U; depth changes once, at
the final ``upsample_depth``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from . import volume_ops as vo
from .ecfn import ECFN, EcfnConfig
from .emsm import EMSM, EmsmConfig
from .errors import ConfigError
from .layers import Conv, Module
from .tensor import Tensor

ATTENTION_VARIANTS = {
    "none": EmsmConfig(enable_inplane=False, enable_throughplane=False, bypass=True),
    "inplane": EmsmConfig(enable_inplane=True, enable_throughplane=False),
    "throughplane": EmsmConfig(enable_inplane=False, enable_throughplane=True),
    "cascaded": EmsmConfig(fusion="cascaded"),
    "parallel": EmsmConfig(fusion="parallel"),
}

CONVOLUTION_VARIANTS = {
    "full3d": EcfnConfig(fusion="full3d"),
    "cascaded": EcfnConfig(fusion="cascaded"),
    "parallel": EcfnConfig(fusion="parallel"),
}


@dataclass
class ModelConfig:
    base_channels: int = 64
    levels: int = 4
    heads_in: tuple[int, ...] = (1, 2, 4, 8)
    heads_th: int = 2
    r: float = 2.0
    emsm: EmsmConfig = field(default_factory=EmsmConfig)
    ecfn: EcfnConfig = field(default_factory=EcfnConfig)
    pre_norm: bool = False

    def channels(self, level: int) -> int:
        """Width at 1-based ``level``; level 0 is the stem output (= C)."""
        return self.base_channels * 2 ** max(level - 1, 0)

    def heads(self, level: int) -> int:
        return self.heads_in[level - 1]

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.heads_in) < self.levels:
            raise ConfigError(f"need {self.levels} in-plane head counts, got {list(self.heads_in)}")
        if self.r < 1:
            raise ConfigError(f"scale factor r must be >= 1, got {self.r}")
        self.emsm.validate()
        self.ecfn.validate()

    def check_input(self, shape: tuple[int, ...]) -> None:
        if len(shape) != 5 or shape[1] != 1:
            raise ConfigError(f"input must be (N, 1, D, H, W), got {shape}")
        div = 2 ** (self.levels - 1)
        if shape[3] % div or shape[4] % div:
            raise ConfigError(f"H and W must be divisible by {div} for {self.levels} levels, got {shape[3:]}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads_in"] = list(self.heads_in)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        emsm = EmsmConfig(**d.pop("emsm", {}))
        ecfn = EcfnConfig(**d.pop("ecfn", {}))
        if "heads_in" in d:
            d["heads_in"] = tuple(d["heads_in"])
        return cls(emsm=emsm, ecfn=ecfn, **d)

    def with_attention(self, variant: str) -> "ModelConfig":
        cfg = copy.deepcopy(self)
        cfg.emsm = copy.deepcopy(ATTENTION_VARIANTS[variant])
        return cfg

    def with_convolution(self, variant: str) -> "ModelConfig":
        cfg = copy.deepcopy(self)
        cfg.ecfn = copy.deepcopy(CONVOLUTION_VARIANTS[variant])
        cfg.ecfn.activation = self.ecfn.activation
        return cfg


class LitBlock(Module):
    def __init__(self, c_in: int, c_out: int, heads_in: int, heads_th: int, cfg: ModelConfig, rng: np.random.Generator):
        emsm_cfg = copy.deepcopy(cfg.emsm)
        emsm_cfg.pre_norm = emsm_cfg.pre_norm or cfg.pre_norm
        self.emsm = EMSM(c_in, heads_in, heads_th, emsm_cfg, rng)
        self.ecfn = ECFN(c_in, c_out, cfg.ecfn, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.ecfn(self.emsm(x))


class LITFormer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        levels = cfg.levels
        C = cfg.base_channels
        self.stem = ECFN(1, C, cfg.ecfn, rng)
        self.enc = [
            LitBlock(cfg.channels(l - 1), cfg.channels(l), cfg.heads(l), cfg.heads_th, cfg, rng)
            for l in range(1, levels + 1)
        ]
        self.reduce = []
        self.dec = []
        for l in range(levels - 1, 0, -1):
            self.reduce.append(Conv(cfg.channels(l + 1), cfg.channels(l), "pointwise", rng))
            self.dec.append(LitBlock(cfg.channels(l), cfg.channels(l), cfg.heads(l), cfg.heads_th, cfg, rng))
        self.refine = ECFN(C, C, cfg.ecfn, rng)
        self.head = ECFN(C, 1, cfg.ecfn, rng)

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        """Restore ``(N, 1, D, H, W)`` to ``(N, 1, round(r*D), H, W)``.

        If ``trace`` is a list, ``(stage, shape)`` pairs are appended to it.
        """
        cfg = self.cfg
        cfg.check_input(x.shape)

        def mark(stage, t):
            if trace is not None:
                trace.append((stage, t.shape))
            return t

        f0 = mark("stem", self.stem(x))
        h = f0
        skips = []
        for i, block in enumerate(self.enc):
            if i:
                h = mark(f"pool{i}", vo.maxpool_inplane(h))
            h = mark(f"enc{i}", block(h))
            skips.append(h)
        mark("latent", h)
        for i, (reduce, block) in enumerate(zip(self.reduce, self.dec)):
            h = mark(f"up{i}", vo.upsample_transverse(h))
            h = mark(f"reduce{i}", reduce(h))
            h = mark(f"dec{i}", block(h))
            h = mark(f"skip{i}", T.add(h, skips[len(skips) - 2 - i]))
        fdf = mark("dense", T.add(self.refine(h), f0))
        up = mark("upsample_depth", vo.upsample_depth(fdf, cfg.r))
        return mark("head", self.head(up))

    def emsm_blocks(self) -> list[EMSM]:
        return [b.emsm for b in self.enc + self.dec]

    def ecfn_blocks(self) -> list[ECFN]:
        return [self.stem] + [b.ecfn for b in self.enc + self.dec] + [self.refine, self.head]


def build(cfg: ModelConfig, seed: int = 0) -> LITFormer:
    """Deterministically initialise a model from ``seed``."""
    model = LITFormer(cfg, np.random.default_rng(seed))
    model.assign_names()
    return model


def variant_2plus1d_unet(cfg: ModelConfig, seed: int = 0) -> LITFormer:
    """The same assembly with every eMSM bypassed (pure residual)."""
    return build(cfg.with_attention("none"), seed)


def desk_config(**overrides) -> ModelConfig:
    """Small configuration for CPU experiments."""
    base = dict(base_channels=16, levels=4, heads_in=(1, 2, 4, 8), heads_th=2, r=2.0)
    base.update(overrides)
    return ModelConfig(**base)


def micro_config(**overrides) -> ModelConfig:
    """Smallest configuration used for whole-network gradient checks."""
    base = dict(base_channels=4, levels=3, heads_in=(1, 2, 4), heads_th=2, r=2.0)
    base.update(overrides)
    return ModelConfig(**base)
