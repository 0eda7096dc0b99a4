"""Volume-level evaluation: model restoration, the trilinear baseline, residual histograms."""

from __future__ import annotations

import json
from typing import Callable, Iterable, Optional

import numpy as np

from . import volume_ops as vo
from .data import Volume, denormalize, normalize
from .objectives import MetricReport, aggregate, evaluate_pair
from .tensor import Tensor, no_grad, precision

HIST_EDGES = np.arange(-200.0, 205.0, 5.0)


def trilinear_baseline(ldr: Volume, r: float) -> np.ndarray:
    """Normalized LDRCT upsampled along depth only (transverse extents already match)."""
    with precision(np.float64), no_grad():
        x = Tensor(normalize(ldr)[None, None])
        return vo.upsample_depth(x, r).data[0, 0]


def residual_histogram(pred_normalized: np.ndarray, target: Volume) -> dict:
    """Counts of ``pred - target`` in HU over fixed 5 HU bins on [-200, 200]."""
    resid = denormalize(pred_normalized) - denormalize(normalize(target))
    counts, _ = np.histogram(resid, bins=HIST_EDGES)
    return {
        "edges": HIST_EDGES.tolist(),
        "counts": counts.tolist(),
        "below": int((resid < HIST_EDGES[0]).sum()),
        "above": int((resid > HIST_EDGES[-1]).sum()),
    }


def evaluate_volumes(
    volumes: Iterable[tuple[str, Volume, Volume]],
    restore: Callable[[Volume], np.ndarray],
) -> tuple[list[MetricReport], dict]:
    """Metrics per volume plus a pooled residual histogram for one restoration method."""
    reports = []
    counts: Optional[np.ndarray] = None
    below = above = 0
    for vid, ldr, ndr in volumes:
        pred = restore(ldr)
        reports.append(evaluate_pair(vid, pred, normalize(ndr)))
        h = residual_histogram(pred, ndr)
        c = np.asarray(h["counts"])
        counts = c if counts is None else counts + c
        below += h["below"]
        above += h["above"]
    hist = {"edges": HIST_EDGES.tolist(), "counts": [] if counts is None else counts.tolist(),
            "below": below, "above": above}
    return reports, hist


def report_lines(method: str, reports: list[MetricReport], hist: dict) -> list[str]:
    """Line-oriented JSON: one line per volume, the mean, then the histogram."""
    lines = [json.dumps({"method": method, **json.loads(r.to_line())}) for r in reports]
    lines.append(json.dumps({"method": method, **json.loads(aggregate(reports).to_line())}))
    lines.append(json.dumps({"method": method, "histogram": hist}))
    return lines
