"""Training losses (differentiable) and evaluation metrics (numpy).

All intensities are on the normalized [0, 1] scale, so the SSIM/PSNR data
range is 1.0.  SSIM uses a Gaussian window (11 taps, sigma 1.5) evaluated
only where the window fits entirely inside the image; images smaller than
the window use the largest odd window that fits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

K1, K2 = 0.01, 0.03
WINDOW, SIGMA = 11, 1.5
DATA_RANGE = 1.0
PSNR_CAP = 100.0
LOSS_MODES = ("charbonnier", "l1", "mse", "ssim", "charbonnier_plus_ssim")


@dataclass
class LossConfig:
    epsilon: float = 1.0e-3
    lam: float = 2.0
    mode: str = "charbonnier_plus_ssim"

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")


def gaussian_taps(n: int, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def window_size(extent: int, window: int = WINDOW) -> int:
    w = min(window, extent)
    return w if w % 2 else w - 1


def valid_filter_matrix(n: int, window: int = WINDOW) -> np.ndarray:
    """``(n - w + 1, n)`` matrix applying the Gaussian window at every valid position."""
    w = window_size(n, window)
    taps = gaussian_taps(w)
    m = np.zeros((n - w + 1, n))
    for i in range(n - w + 1):
        m[i, i : i + w] = taps
    return m


def _same_shape(a, b, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# losses --------------------------------------------------------------------

def charbonnier(pred: Tensor, target: Tensor, eps: float = 1.0e-3) -> Tensor:
    """``sqrt(||pred - target||_F^2 + eps^2)`` per batch item, then averaged."""
    _same_shape(pred, target, "charbonnier")
    diff = T.sub(pred, target)
    sq = T.sum(T.square(diff), axis=tuple(range(1, pred.ndim)))
    return T.mean(T.sqrt(sq + eps * eps))


def _ssim_slices(a: Tensor, b: Tensor) -> Tensor:
    """SSIM of every ``H x W`` slice; returns shape ``a.shape[:-2]``."""
    h, w = a.shape[-2:]
    fh, fw = valid_filter_matrix(h), valid_filter_matrix(w)

    def filt(x):
        return T.linear_map(T.linear_map(x, fh, axis=-2), fw, axis=-1)

    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = T.square(mu_a), T.square(mu_b), T.mul(mu_a, mu_b)
    s_aa = T.sub(filt(T.square(a)), mu_aa)
    s_bb = T.sub(filt(T.square(b)), mu_bb)
    s_ab = T.sub(filt(T.mul(a, b)), mu_ab)
    num = T.mul(T.scale(mu_ab, 2.0) + c1, T.scale(s_ab, 2.0) + c2)
    den = T.mul(T.add(mu_aa, mu_bb) + c1, T.add(s_aa, s_bb) + c2)
    return T.mean(T.div(num, den), axis=(-2, -1))


def ssim_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 minus the mean slice-wise SSIM over batch, channel and depth."""
    _same_shape(pred, target, "ssim_loss")
    return 1.0 - T.mean(_ssim_slices(pred, target))


def total_loss(pred: Tensor, target: Tensor, cfg: LossConfig, parts: Optional[dict] = None) -> Tensor:
    """Weighted training objective; ``parts`` (if given) receives component values."""
    cfg.validate()
    _same_shape(pred, target, "total_loss")
    mode = cfg.mode
    terms: dict[str, Tensor] = {}
    if mode == "l1":
        terms["l1"] = T.mean(T.abs(T.sub(pred, target)))
        loss = terms["l1"]
    elif mode == "mse":
        terms["mse"] = T.mean(T.square(T.sub(pred, target)))
        loss = terms["mse"]
    elif mode == "ssim":
        terms["ssim"] = ssim_loss(pred, target)
        loss = terms["ssim"]
    else:
        terms["charbonnier"] = charbonnier(pred, target, cfg.epsilon)
        loss = terms["charbonnier"]
        if mode == "charbonnier_plus_ssim":
            terms["ssim"] = ssim_loss(pred, target)
            if cfg.lam:
                loss = T.add(loss, T.scale(terms["ssim"], cfg.lam))
    if parts is not None:
        parts.update({k: v.item() for k, v in terms.items()})
        parts["total"] = loss.item()
    return loss


# metrics -------------------------------------------------------------------

def _filter_np(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    for ax in axes:
        m = valid_filter_matrix(x.shape[ax])
        x = np.moveaxis(np.tensordot(m, x, axes=([1], [ax])), 0, ax)
    return x


def _ssim_np(a: np.ndarray, b: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _filter_np(a, axes), _filter_np(b, axes)
    s_aa = _filter_np(a * a, axes) - mu_a**2
    s_bb = _filter_np(b * b, axes) - mu_b**2
    s_ab = _filter_np(a * b, axes) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * s_ab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2))
    return smap.mean(axis=axes)


def ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM of two ``H x W`` images."""
    _same_shape(a, b, "ssim_2d")
    if np.ndim(a) != 2:
        raise DimensionError(f"ssim_2d expects 2D images, got shape {np.shape(a)}")
    return float(_ssim_np(a, b, (0, 1)))


def ssim_2d_volume(a: np.ndarray, b: np.ndarray) -> float:
    """Slice-averaged 2D SSIM of two ``D x H x W`` volumes."""
    _same_shape(a, b, "ssim_2d_volume")
    return float(_ssim_np(a, b, (1, 2)).mean())


def ssim_3d(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM with an 11x11x11 Gaussian window over ``D x H x W`` volumes."""
    _same_shape(a, b, "ssim_3d")
    if np.ndim(a) != 3:
        raise DimensionError(f"ssim_3d expects 3D volumes, got shape {np.shape(a)}")
    return float(_ssim_np(a, b, (0, 1, 2)))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    _same_shape(pred, target, "rmse")
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """PSNR in dB on a unit data range; identical inputs give ``PSNR_CAP``."""
    _same_shape(pred, target, "psnr")
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(DATA_RANGE**2 / mse), PSNR_CAP)


@dataclass
class MetricReport:
    id: str
    psnr: float
    rmse: float
    ssim2d: float
    ssim3d: float

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_line(cls, line: str) -> "MetricReport":
        return cls(**json.loads(line))


def evaluate_pair(volume_id: str, pred: np.ndarray, target: np.ndarray) -> MetricReport:
    """All four metrics for one ``D x H x W`` pair on the normalized scale."""
    return MetricReport(
        id=volume_id,
        psnr=psnr(pred, target),
        rmse=rmse(pred, target),
        ssim2d=ssim_2d_volume(pred, target),
        ssim3d=ssim_3d(pred, target),
    )


def aggregate(reports: list[MetricReport], volume_id: str = "mean") -> MetricReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    return MetricReport(
        id=volume_id,
        psnr=float(np.mean([r.psnr for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        ssim2d=float(np.mean([r.ssim2d for r in reports])),
        ssim3d=float(np.mean([r.ssim3d for r in reports])),
    )
