"""Efficient multi-head self-attention (in-plane + through-plane).

The in-plane branch pools over depth and attends across channels (a
``C/h x C/h`` map per head).  The through-plane branch pools over the
transverse plane and attends across slices (a ``D x D`` map per head).
Both outputs are broadcast back to ``(N, C, D, H, W)`` and added to the
input.

Attention maps are kept query-major: row ``i`` holds the weights that query
``i`` assigns to every key, so each row sums to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import volume_ops as vo
from .layers import DepthwiseConv, Module, Pointwise
from .tensor import ConfigError, Tensor

FUSIONS = ("parallel", "cascaded")


@dataclass
class EmsmConfig:
    enable_inplane: bool = True
    enable_throughplane: bool = True
    fusion: str = "parallel"
    bypass: bool = False
    pre_norm: bool = False

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigError(f"eMSM fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not self.bypass and not (self.enable_inplane or self.enable_throughplane):
            raise ConfigError("eMSM with both branches disabled must be marked bypass")

    @property
    def active(self) -> bool:
        return not self.bypass and (self.enable_inplane or self.enable_throughplane)


class Projection(Module):
    """Pointwise channel mixing followed by a depth-wise 3-tap (1D) or 3x3 (2D) conv."""

    def __init__(self, channels: int, ndim: int, rng: np.random.Generator):
        self.pw = Pointwise(channels, channels, rng)
        self.dw = DepthwiseConv(channels, ndim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.dw(self.pw(x))


def standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel zero-mean unit-variance over (D, H, W)."""
    axes = (2, 3, 4)
    mu = T.mean(x, axis=axes, keepdims=True)
    xc = T.broadcast_add(x, T.neg(mu), axes)
    var = T.mean(T.square(xc), axis=axes, keepdims=True)
    inv = T.reciprocal(T.sqrt(var + eps))
    return T.broadcast_mul(xc, inv, axes)


class EMSM(Module):
    def __init__(self, channels: int, heads_in: int, heads_th: int, cfg: EmsmConfig, rng: np.random.Generator):
        cfg.validate()
        if cfg.active:
            if cfg.enable_inplane and channels % heads_in:
                raise ConfigError(f"heads_in={heads_in} does not divide C={channels}")
            if cfg.enable_throughplane and channels % heads_th:
                raise ConfigError(f"heads_th={heads_th} does not divide C={channels}")
        self.cfg = cfg
        self.channels = channels
        self.heads_in = heads_in
        self.heads_th = heads_th
        if cfg.active and cfg.enable_inplane:
            self.q_in = Projection(channels, 2, rng)
            self.k_in = Projection(channels, 2, rng)
            self.v_in = Projection(channels, 2, rng)
            self.g_in = Pointwise(channels, channels, rng)
            init = math.sqrt(channels / heads_in)
            self.alpha = Tensor(np.full(heads_in, init, dtype=np.float32), requires_grad=True)
        if cfg.active and cfg.enable_throughplane:
            self.q_th = Projection(channels, 1, rng)
            self.k_th = Projection(channels, 1, rng)
            self.v_th = Projection(channels, 1, rng)
            self.g_th = Pointwise(channels, channels, rng)

    # branches ---------------------------------------------------------------

    def inplane(self, x: Tensor, return_attention: bool = False):
        """eMSM-I: ``(N, C, D, H, W) -> (N, C, H, W)``."""
        if self.cfg.pre_norm:
            x = standardize(x)
        xin = vo.gap_through(x)
        n, c, h, w = xin.shape
        heads = self.heads_in
        split = (n, heads, c // heads, h * w)
        q = T.reshape(self.q_in(xin), split)
        k = T.reshape(self.k_in(xin), split)
        v = T.reshape(self.v_in(xin), split)
        logits = T.matmul(q, T.transpose(k), label="attn_map_in")
        inv_alpha = T.reshape(T.reciprocal(self.alpha), (1, heads, 1, 1))
        attn = T.softmax(T.broadcast_mul(logits, inv_alpha, axes=(0, 2, 3)), axis=-1)
        mixed = T.matmul(attn, v, label="attn_apply_in")
        out = self.g_in(T.reshape(mixed, (n, c, h, w)))
        return (out, attn) if return_attention else out

    def throughplane(self, x: Tensor, return_attention: bool = False):
        """eMSM-T: ``(N, C, D, H, W) -> (N, C, D)``."""
        if self.cfg.pre_norm:
            x = standardize(x)
        xth = vo.gap_inplane(x)
        n, c, d = xth.shape
        heads = self.heads_th
        split = (n, heads, c // heads, d)
        q = T.reshape(self.q_th(xth), split)
        k = T.reshape(self.k_th(xth), split)
        v = T.reshape(self.v_th(xth), split)
        logits = T.matmul(T.transpose(q), k, label="attn_map_th")
        attn = T.softmax(T.scale(logits, 1.0 / math.sqrt(d)), axis=-1)
        mixed = T.matmul(v, T.transpose(attn), label="attn_apply_th")
        out = self.g_th(T.reshape(mixed, (n, c, d)))
        return (out, attn) if return_attention else out

    def _add_inplane(self, x: Tensor) -> Tensor:
        n, c, _, h, w = x.shape
        return T.broadcast_add(x, T.reshape(self.inplane(x), (n, c, 1, h, w)), axes=(2,))

    def _add_throughplane(self, x: Tensor) -> Tensor:
        n, c, d, _, _ = x.shape
        return T.broadcast_add(x, T.reshape(self.throughplane(x), (n, c, d, 1, 1)), axes=(3, 4))

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if not cfg.active:
            return x
        if cfg.fusion == "cascaded" and cfg.enable_inplane and cfg.enable_throughplane:
            return self._add_throughplane(self._add_inplane(x))
        n, c, d, h, w = x.shape
        out = x
        if cfg.enable_inplane:
            out = T.broadcast_add(out, T.reshape(self.inplane(x), (n, c, 1, h, w)), axes=(2,))
        if cfg.enable_throughplane:
            out = T.broadcast_add(out, T.reshape(self.throughplane(x), (n, c, d, 1, 1)), axes=(3, 4))
        return out

    def output_projections(self) -> list[Pointwise]:
        return [m for m in (getattr(self, "g_in", None), getattr(self, "g_th", None)) if m is not None]
