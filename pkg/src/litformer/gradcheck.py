"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple[str, tuple[int, ...]] = ("", ())
    errors: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index: tuple[int, ...], step: float = 1e-5) -> float:
    orig = t.data[index]
    with T.no_grad():
        t.data[index] = orig + step
        plus = fn().item()
        t.data[index] = orig - step
        minus = fn().item()
    t.data[index] = orig
    return (plus - minus) / (2 * step)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    per_tensor: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare ``backward`` against central differences.

    ``fn`` must rebuild the scalar loss from the current tensor values.  With
    ``per_tensor`` set, that many randomly chosen entries of each tensor are
    probed; otherwise every entry is.
    """
    for _, t in tensors:
        t.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    result = GradCheckResult(0.0, 0)
    for name, t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if per_tensor is None or per_tensor >= t.size:
            flat = range(t.size)
        else:
            flat = rng.choice(t.size, size=per_tensor, replace=False)
        worst = 0.0
        for f in flat:
            idx = np.unravel_index(int(f), t.shape)
            err = rel_error(float(analytic[idx]), numerical_grad(fn, t, idx, step))
            result.checked += 1
            worst = max(worst, err)
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, tuple(int(i) for i in idx))
        result.errors[name] = worst
    return result


def network_gradcheck(cfg=None, input_shape=(1, 1, 4, 16, 16), seed: int = 0, per_tensor: Optional[int] = 4) -> GradCheckResult:
    """Whole-network check in 64-bit on the micro configuration."""
    from .network import build, micro_config
    from .objectives import LossConfig, total_loss

    cfg = cfg or micro_config()
    rng = np.random.default_rng(seed)
    model = build(cfg, seed).astype(np.float64)
    with T.precision(np.float64):
        x = Tensor(rng.uniform(-1, 1, size=input_shape), requires_grad=True)
        # Target close to the current output keeps |loss| ~ 1, so round-off in
        # the difference quotient stays well below the smallest gradients.
        with T.no_grad():
            out = model(x).data
        target = Tensor(out + rng.uniform(-0.05, 0.05, size=out.shape))
        loss_cfg = LossConfig()

        def fn():
            return total_loss(model(x), target, loss_cfg)

        tensors = [("input", x)] + list(model.named_parameters())
        return check_gradients(fn, tensors, per_tensor=per_tensor, seed=seed)
