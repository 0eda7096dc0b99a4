"""Feature-map primitives for ``(N, C, D, H, W)`` volumes.

Convolutions use zero "same" padding and are plain cross-correlations.  The
in-plane and through-plane kernels are stored in full 5D form
(``C_o x C_i x 1 x k x k`` and ``C_o x C_i x k x 1 x 1``) so one routine
serves every kernel footprint.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    linear_map,
    make_node,
    mean,
    record_macs,
)

__all__ = [
    "conv_inplane",
    "conv_throughplane",
    "conv_pointwise",
    "conv3d",
    "dwconv2d",
    "dwconv1d",
    "gap_through",
    "gap_inplane",
    "maxpool_inplane",
    "upsample_transverse",
    "upsample_depth",
    "interp_matrix",
    "depth_out",
]


def _pad(x: np.ndarray, kernel: tuple[int, ...]) -> np.ndarray:
    widths = [(0, 0), (0, 0)] + [((k - 1) // 2, (k - 1) // 2) for k in kernel]
    if all(p == (0, 0) for p in widths):
        return x
    return np.pad(x, widths)


def _windows(xp: np.ndarray, kernel: tuple[int, ...], spatial: tuple[int, ...]):
    for off in np.ndindex(*kernel):
        sl = (slice(None), slice(None)) + tuple(slice(o, o + n) for o, n in zip(off, spatial))
        yield off, xp[sl]


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dense same-padded correlation; x ``(N, Ci, *S)``, w ``(Co, Ci, *k)``."""
    kernel = w.shape[2:]
    spatial = x.shape[2:]
    xp = _pad(x, kernel)
    out = np.zeros((w.shape[0], x.shape[0]) + spatial, dtype=x.dtype)
    for off, win in _windows(xp, kernel, spatial):
        out += np.tensordot(w[(slice(None), slice(None)) + off], win, axes=([1], [1]))
    return np.ascontiguousarray(np.moveaxis(out, 0, 1))


def _correlate_wgrad(x: np.ndarray, g: np.ndarray, kernel: tuple[int, ...]) -> np.ndarray:
    spatial = x.shape[2:]
    xp = _pad(x, kernel)
    red = [0] + list(range(2, x.ndim))
    gw = np.empty((g.shape[1], x.shape[1]) + kernel, dtype=x.dtype)
    for off, win in _windows(xp, kernel, spatial):
        gw[(slice(None), slice(None)) + off] = np.tensordot(g, win, axes=(red, red))
    return gw


def _flip(w: np.ndarray) -> np.ndarray:
    return w[(slice(None), slice(None)) + (slice(None, None, -1),) * (w.ndim - 2)]


def _depthwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-channel same-padded correlation; w ``(C, *k)``."""
    kernel = w.shape[1:]
    spatial = x.shape[2:]
    xp = _pad(x, kernel)
    out = np.zeros_like(x)
    bshape = (1, -1) + (1,) * len(spatial)
    for off, win in _windows(xp, kernel, spatial):
        out += w[(slice(None),) + off].reshape(bshape) * win
    return out


def _depthwise_wgrad(x: np.ndarray, g: np.ndarray, kernel: tuple[int, ...]) -> np.ndarray:
    xp = _pad(x, kernel)
    red = (0,) + tuple(range(2, x.ndim))
    gw = np.empty((x.shape[1],) + kernel, dtype=x.dtype)
    for off, win in _windows(xp, kernel, x.shape[2:]):
        gw[(slice(None),) + off] = (g * win).sum(axis=red)
    return gw


def _bias_view(b: Tensor, ndim: int) -> np.ndarray:
    return b.data.reshape((1, -1) + (1,) * (ndim - 2))


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0,) + tuple(range(2, g.ndim)))


def _dense_conv(x: Tensor, w: Tensor, bias: Optional[Tensor], label: str) -> Tensor:
    if w.ndim != x.ndim:
        raise DimensionError(f"{label}: kernel rank {w.ndim} does not match input rank {x.ndim}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"{label}: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    kernel = w.shape[2:]
    if any(k % 2 == 0 for k in kernel):
        raise ContractError(f"{label}: kernel extents must be odd, got {kernel}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"{label}: bias shape {bias.shape} for {w.shape[0]} output channels")
    co, ci = w.shape[:2]
    record_macs(label, ci * co * int(np.prod(kernel)) * x.shape[0] * int(np.prod(x.shape[2:])))
    out = _correlate(x.data, w.data)
    if bias is not None:
        out += _bias_view(bias, out.ndim)

    def backward(g):
        gx = _correlate(g, np.swapaxes(_flip(w.data), 0, 1)) if x.requires_grad else None
        gw = _correlate_wgrad(x.data, g, kernel) if w.requires_grad else None
        gb = _bias_grad(g) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_node(out, parents, backward, label)


def _check5(x: Tensor, name: str) -> None:
    if x.ndim != 5:
        raise DimensionError(f"{name} expects (N, C, D, H, W), got shape {x.shape}")


def conv_inplane(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2D ``1 x k x k`` convolution applied to each depth slice independently."""
    _check5(x, "conv_inplane")
    if weights.ndim != 5 or weights.shape[2] != 1:
        raise DimensionError(f"conv_inplane kernel must be C_o x C_i x 1 x k x k, got {weights.shape}")
    return _dense_conv(x, weights, bias, "conv_inplane")


def conv_throughplane(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1D ``k x 1 x 1`` convolution along depth."""
    _check5(x, "conv_throughplane")
    if weights.ndim != 5 or weights.shape[3:] != (1, 1):
        raise DimensionError(f"conv_throughplane kernel must be C_o x C_i x k x 1 x 1, got {weights.shape}")
    return _dense_conv(x, weights, bias, "conv_throughplane")


def conv3d(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    _check5(x, "conv3d")
    return _dense_conv(x, weights, bias, "conv3d")


def conv_pointwise(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-voxel channel mixing.  Works for any ``(N, C, *S)`` input.

    ``weights`` may be ``(C_o, C_i)`` or carry trailing singleton kernel axes.
    """
    w2 = weights.data.reshape(weights.shape[0], -1) if weights.ndim > 2 else weights.data
    if weights.ndim > 2 and w2.shape[1] != weights.shape[1]:
        raise DimensionError(f"conv_pointwise kernel must be 1x1x1, got {weights.shape}")
    if x.shape[1] != w2.shape[1]:
        raise DimensionError(f"conv_pointwise: input has {x.shape[1]} channels, kernel expects {w2.shape[1]}")
    co, ci = w2.shape
    record_macs("conv_pointwise", ci * co * x.shape[0] * int(np.prod(x.shape[2:])))
    out = np.ascontiguousarray(np.moveaxis(np.tensordot(w2, x.data, axes=([1], [1])), 0, 1))
    if bias is not None:
        out += _bias_view(bias, out.ndim)
    red = [0] + list(range(2, x.ndim))

    def backward(g):
        gx = np.ascontiguousarray(np.moveaxis(np.tensordot(w2.T, g, axes=([1], [1])), 0, 1)) if x.requires_grad else None
        gw = np.tensordot(g, x.data, axes=(red, red)).reshape(weights.shape) if weights.requires_grad else None
        gb = _bias_grad(g) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weights, bias) if bias is not None else (x, weights)
    return make_node(out, parents, backward, "conv_pointwise")


def _depthwise_conv(x: Tensor, w: Tensor, bias: Optional[Tensor], label: str) -> Tensor:
    if w.shape[0] != x.shape[1] or w.ndim - 1 != x.ndim - 2:
        raise DimensionError(f"{label}: kernel {w.shape} does not fit input {x.shape}")
    kernel = w.shape[1:]
    if any(k % 2 == 0 for k in kernel):
        raise ContractError(f"{label}: kernel extents must be odd, got {kernel}")
    record_macs(label, x.shape[1] * int(np.prod(kernel)) * x.shape[0] * int(np.prod(x.shape[2:])))
    out = _depthwise(x.data, w.data)
    if bias is not None:
        out += _bias_view(bias, out.ndim)

    def backward(g):
        flipped = w.data[(slice(None),) + (slice(None, None, -1),) * len(kernel)]
        gx = _depthwise(g, flipped) if x.requires_grad else None
        gw = _depthwise_wgrad(x.data, g, kernel) if w.requires_grad else None
        gb = _bias_grad(g) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_node(out, parents, backward, label)


def dwconv2d(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Depth-wise 2D convolution of ``(N, C, H, W)`` maps; weights ``(C, k, k)``."""
    if x.ndim != 4 or weights.ndim != 3:
        raise DimensionError(f"dwconv2d expects (N, C, H, W) and (C, k, k), got {x.shape}, {weights.shape}")
    return _depthwise_conv(x, weights, bias, "dwconv2d")


def dwconv1d(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Depth-wise 1D convolution of ``(N, C, D)`` sequences; weights ``(C, k)``."""
    if x.ndim != 3 or weights.ndim != 2:
        raise DimensionError(f"dwconv1d expects (N, C, D) and (C, k), got {x.shape}, {weights.shape}")
    return _depthwise_conv(x, weights, bias, "dwconv1d")


def gap_through(x: Tensor) -> Tensor:
    """Mean over depth: ``(N, C, D, H, W) -> (N, C, H, W)``."""
    _check5(x, "gap_through")
    return mean(x, axis=2)


def gap_inplane(x: Tensor) -> Tensor:
    """Mean over the transverse plane: ``(N, C, D, H, W) -> (N, C, D)``."""
    _check5(x, "gap_inplane")
    return mean(x, axis=(3, 4))


def maxpool_inplane(x: Tensor) -> Tensor:
    """2x2 transverse max-pool per slice; ties go to the first window index."""
    _check5(x, "maxpool_inplane")
    n, c, d, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool_inplane needs even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, d, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6).reshape(n, c, d, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(n, c, d, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6).reshape(n, c, d, h, w)
        return (gw,)

    return make_node(out, (x,), backward, "maxpool_inplane")


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix under the align-corners convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_transverse(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear per-slice upsampling; depth is untouched."""
    _check5(x, "upsample_transverse")
    _, _, _, h, w = x.shape
    y = linear_map(x, interp_matrix(h, h * factor), axis=3)
    return linear_map(y, interp_matrix(w, w * factor), axis=4)


def depth_out(d: int, r: float) -> int:
    return int(math.floor(r * d + 0.5))


def upsample_depth(x: Tensor, r: float) -> Tensor:
    """Linear interpolation along depth to ``round(r * D)`` slices."""
    _check5(x, "upsample_depth")
    if r < 1:
        raise ContractError(f"depth scale factor must be >= 1, got {r}")
    d = x.shape[2]
    return linear_map(x, interp_matrix(d, depth_out(d, r)), axis=2)
