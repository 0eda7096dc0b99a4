"""Parameter and multiply-accumulate accounting for LIT-Former models.

Analytic counts are derived from layer hyperparameters and the input shape
alone.  Measured counts come from running the model under an ``OpCounter``;
the two are compared label by label.  One MAC is one FLOP unit here.
Softmax, pooling, interpolation and elementwise work are not MACs and are
left out of every count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import tensor as T
from .ecfn import ECFN, EcfnUnit
from .emsm import EMSM
from .layers import Conv, DepthwiseConv, Module, Pointwise
from .network import LITFormer, ModelConfig, build, variant_2plus1d_unet
from .volume_ops import depth_out

REFERENCE_INPUT = (1, 1, 16, 64, 64)
PUBLISHED_TARGETS = {
    "litformer_params": (7.2e6, 0.20),
    "unet2plus1d_params": (5.8e6, 0.20),
    "litformer_macs": (27.2e9, 0.30),
    "unet2plus1d_macs": (26.9e9, 0.30),
}
ASSUMPTIONS = [
    "FLOPs are counted as multiply-accumulates (one MAC = one FLOP unit), not 2x MACs.",
    "Published FLOPs are compared at input (1, 1, 16, 64, 64), the training patch size.",
    "Softmax, pooling, interpolation and elementwise ops are excluded from MAC totals.",
]


@dataclass
class LayerEntry:
    name: str
    op: str
    params: int
    bias: int
    macs_analytic: int

    @property
    def label(self) -> str:
        return f"{self.name}:{self.op}"


@dataclass
class Check:
    claim: str
    predicted: float
    measured: float
    passed: bool
    note: str = ""


@dataclass
class ComplexityReport:
    model: str
    input_shape: tuple[int, ...]
    entries: list[LayerEntry] = field(default_factory=list)
    formula_checks: list[Check] = field(default_factory=list)
    assumptions: list[str] = field(default_factory=lambda: list(ASSUMPTIONS))

    @property
    def total_params(self) -> int:
        return sum(e.params + e.bias for e in self.entries)

    @property
    def total_bias(self) -> int:
        return sum(e.bias for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs_analytic for e in self.entries)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.formula_checks)

    def to_json(self) -> str:
        doc = {
            "model": self.model,
            "input_shape": list(self.input_shape),
            "assumptions": self.assumptions,
            "totals": {"params": self.total_params, "bias_params": self.total_bias, "macs": self.total_macs},
            "entries": [asdict(e) for e in self.entries],
            "formula_checks": [asdict(c) for c in self.formula_checks],
        }
        return json.dumps(doc, indent=2)

    def to_table(self) -> str:
        width = max([len(e.label) for e in self.entries] + [10])
        lines = [f"# {self.model}  input={self.input_shape}"]
        lines += [f"# {a}" for a in self.assumptions]
        lines.append(f"{'layer':<{width}}  {'params':>10}  {'bias':>6}  {'MACs':>14}")
        for e in self.entries:
            lines.append(f"{e.label:<{width}}  {e.params:>10}  {e.bias:>6}  {e.macs_analytic:>14}")
        lines.append(f"{'TOTAL':<{width}}  {self.total_params:>10}  {self.total_bias:>6}  {self.total_macs:>14}")
        if self.formula_checks:
            lines.append("")
            for c in self.formula_checks:
                status = "PASS" if c.passed else "FAIL"
                lines.append(f"[{status}] {c.claim}: predicted={c.predicted:.6g} measured={c.measured:.6g} {c.note}")
        return "\n".join(lines)


# parameters ----------------------------------------------------------------

def count_params(model: Module) -> list[LayerEntry]:
    """One entry per module owning parameters; biases are reported separately."""
    out = []
    for name, mod in model.named_modules():
        own = dict(mod.own_parameters())
        if not own:
            continue
        bias = own.pop("bias", None)
        out.append(LayerEntry(name, "params", int(sum(p.size for p in own.values())), 0 if bias is None else bias.size, 0))
    return out


def unit_kernel_params(unit: EcfnUnit) -> int:
    """Weight count of the convolution kernels of a unit (no bias, no projection)."""
    return sum(c.weight.size for c in unit.kernels())


# analytic MACs -------------------------------------------------------------

class _Walker:
    def __init__(self):
        self.entries: list[LayerEntry] = []

    def add(self, mod: Module, op: str, macs: int) -> None:
        params = int(mod.weight.size) if hasattr(mod, "weight") else 0
        bias = int(mod.bias.size) if getattr(mod, "bias", None) is not None else 0
        self.entries.append(LayerEntry(mod.name, op, params, bias, int(macs)))

    def conv(self, conv: Conv, shape: tuple[int, ...]) -> tuple[int, ...]:
        n, _, d, h, w = shape
        k = conv.k
        footprint = {"inplane": k * k, "throughplane": k, "pointwise": 1, "full3d": k**3}[conv.kind]
        op = {"inplane": "conv_inplane", "throughplane": "conv_throughplane",
              "pointwise": "conv_pointwise", "full3d": "conv3d"}[conv.kind]
        self.add(conv, op, conv.c_in * conv.c_out * footprint * n * d * h * w)
        return (n, conv.c_out, d, h, w)

    def unit(self, unit: EcfnUnit, shape):
        out = None
        if unit.fusion == "cascaded":
            mid = self.conv(unit.conv_i, shape)
            out = self.conv(unit.conv_t, mid)
        else:
            for c in unit.kernels():
                out = self.conv(c, shape)
        if unit.proj is not None:
            self.conv(unit.proj, shape)
        return out

    def ecfn(self, block: ECFN, shape):
        return self.unit(block.unit2, self.unit(block.unit1, shape))

    def projection(self, proj, map_shape):
        n, c = map_shape[:2]
        spatial = int(np.prod(map_shape[2:]))
        self.add(proj.pw, "conv_pointwise", c * c * n * spatial)
        ndim = proj.dw.ndim
        op = "dwconv2d" if ndim == 2 else "dwconv1d"
        self.add(proj.dw, op, c * proj.dw.k**ndim * n * spatial)

    def emsm(self, block: EMSM, shape):
        cfg = block.cfg
        if not cfg.active:
            return shape
        n, c, d, h, w = shape
        if cfg.enable_inplane:
            for p in (block.q_in, block.k_in, block.v_in):
                self.projection(p, (n, c, h, w))
            per_head = c // block.heads_in
            mm = n * block.heads_in * per_head * per_head * h * w
            self.entries.append(LayerEntry(block.name, "attn_map_in", block.alpha.size, 0, mm))
            self.entries.append(LayerEntry(block.name, "attn_apply_in", 0, 0, mm))
            self.add(block.g_in, "conv_pointwise", c * c * n * h * w)
        if cfg.enable_throughplane:
            for p in (block.q_th, block.k_th, block.v_th):
                self.projection(p, (n, c, d))
            mm = n * c * d * d
            self.entries.append(LayerEntry(block.name, "attn_map_th", 0, 0, mm))
            self.entries.append(LayerEntry(block.name, "attn_apply_th", 0, 0, mm))
            self.add(block.g_th, "conv_pointwise", c * c * n * d)
        return shape

    def network(self, model: LITFormer, shape):
        cfg = model.cfg
        n, _, d, h, w = shape
        f0 = self.ecfn(model.stem, shape)
        cur = f0
        for i, block in enumerate(model.enc):
            if i:
                cur = (cur[0], cur[1], cur[2], cur[3] // 2, cur[4] // 2)
            cur = self.ecfn(block.ecfn, self.emsm(block.emsm, cur))
        for reduce, block in zip(model.reduce, model.dec):
            cur = (cur[0], cur[1], cur[2], cur[3] * 2, cur[4] * 2)
            cur = self.conv(reduce, cur)
            cur = self.ecfn(block.ecfn, self.emsm(block.emsm, cur))
        cur = self.ecfn(model.refine, cur)
        cur = (cur[0], cur[1], depth_out(cur[2], cfg.r), cur[3], cur[4])
        return self.ecfn(model.head, cur)


def count_macs(model: Module, input_shape: tuple[int, ...]) -> list[LayerEntry]:
    """Analytic per-layer MACs for ``model`` on ``input_shape``.

    ``model`` may be a full network, an ``ECFN``, an ``EcfnUnit`` or an ``EMSM``.
    Entries carry the same labels the instrumented forward pass records.
    """
    walker = _Walker()
    if isinstance(model, LITFormer):
        model.cfg.check_input(tuple(input_shape))
        walker.network(model, tuple(input_shape))
    elif isinstance(model, ECFN):
        walker.ecfn(model, tuple(input_shape))
    elif isinstance(model, EcfnUnit):
        walker.unit(model, tuple(input_shape))
    elif isinstance(model, EMSM):
        walker.emsm(model, tuple(input_shape))
    else:
        raise TypeError(f"no MAC model for {type(model).__name__}")
    return walker.entries


def instrumented_macs(model: Module, input_shape: tuple[int, ...], seed: int = 0) -> T.OpCounter:
    """Run one forward pass under an ``OpCounter`` and return it."""
    x = T.Tensor(np.random.default_rng(seed).uniform(0, 1, size=input_shape).astype(np.float32))
    with T.no_grad(), T.count_macs() as counter:
        model(x)
    return counter


def attention_map_formula(c: int, d: int, h: int, w: int, heads_in: int = 1) -> int:
    """Attention-map MACs per sample: ``D^2 C + (HW C^2) / heads_in``; the unit-head case is ``(D^2 + HWC) C``."""
    return d * d * c + (h * w * c * c) // heads_in


def attention_3d_formula(c: int, d: int, h: int, w: int) -> int:
    """MACs of a full 3D token-attention map: ``D^2 H^2 W^2 C``."""
    return d * d * h * h * w * w * c


def ecfn_unit_formula(c_in: int, c_out: int, k: int, d: int, h: int, w: int) -> tuple[int, int]:
    """(factorized, full-3D) MACs of one unit's kernels per sample."""
    vox = d * h * w
    return c_in * c_out * (k * k + k) * vox, c_in * c_out * k**3 * vox


# verification --------------------------------------------------------------

def _within(value: float, target: float, tol: float) -> bool:
    return abs(value - target) <= tol * target


def verify_claims(model: LITFormer, input_shape: tuple[int, ...], name: str = "model") -> ComplexityReport:
    """Compare analytic against instrumented counts and check the reduction formulas."""
    entries = count_macs(model, input_shape)
    report = ComplexityReport(name, tuple(input_shape), entries)
    counter = instrumented_macs(model, input_shape)
    measured = dict(counter.per_op_breakdown)
    analytic: dict[str, int] = {}
    for e in entries:
        analytic[e.label] = analytic.get(e.label, 0) + e.macs_analytic
    mismatched = sorted(
        label for label in set(analytic) | set(measured) if analytic.get(label, 0) != measured.get(label, 0)
    )
    checks = report.formula_checks
    checks.append(Check(
        "analytic == instrumented, every layer",
        sum(analytic.values()),
        counter.mac_count,
        not mismatched,
        f"{len(analytic)} labels" + (f"; mismatched: {mismatched[:5]}" if mismatched else ""),
    ))

    n, _, d, h, w = input_shape
    for block in model.enc + model.dec:
        em = block.emsm
        if em.cfg.active and em.cfg.enable_inplane and em.cfg.enable_throughplane:
            level_shape = _block_input_shape(model, block, input_shape)
            _, c, bd, bh, bw = level_shape
            pred = n * attention_map_formula(c, bd, bh, bw, em.heads_in)
            got = counter.total(em.name, "attn_map_in") + counter.total(em.name, "attn_map_th")
            tag = "(D^2+HWC)C" if em.heads_in == 1 else f"D^2C + HWC^2/{em.heads_in}"
            checks.append(Check(f"{em.name} attention-map MACs = {tag}", pred, got, pred == got))

    for unit_name, unit, shape in _units_with_shapes(model, input_shape):
        k = unit.kernels()[0].k
        if unit.fusion == "parallel":
            ratio = Fraction(unit_kernel_params(unit), unit.c_in * unit.c_out * k**3)
            want = Fraction(k * k + k, k**3)
            checks.append(Check(f"{unit_name} params ratio (K^2+K)/K^3", float(want), float(ratio), ratio == want))
            _, _, ud, uh, uw = shape
            pred, _ = ecfn_unit_formula(unit.c_in, unit.c_out, k, ud, uh, uw)
            got = sum(counter.total(c.name, op) for c, op in ((unit.conv_i, "conv_inplane"), (unit.conv_t, "conv_throughplane")))
            checks.append(Check(f"{unit_name} MACs = CiCo(K^2+K)DHW", n * pred, got, n * pred == got))
    return report


def _block_input_shape(model: LITFormer, block, input_shape):
    n, _, d, h, w = input_shape
    if block in model.enc:
        i = model.enc.index(block)
        return (n, model.cfg.channels(i), d, h >> i, w >> i)
    i = model.dec.index(block)
    level = model.cfg.levels - 1 - i
    return (n, model.cfg.channels(level), d, h >> (level - 1), w >> (level - 1))


def _units_with_shapes(model: LITFormer, input_shape):
    n, _, d, h, w = input_shape
    blocks = [(model.stem, (n, 1, d, h, w))]
    for i, b in enumerate(model.enc):
        blocks.append((b.ecfn, (n, b.ecfn.c_in, d, h >> i, w >> i)))
    for i, b in enumerate(model.dec):
        level = model.cfg.levels - 1 - i
        blocks.append((b.ecfn, (n, b.ecfn.c_in, d, h >> (level - 1), w >> (level - 1))))
    blocks.append((model.refine, (n, model.cfg.base_channels, d, h, w)))
    blocks.append((model.head, (n, model.cfg.base_channels, depth_out(d, model.cfg.r), h, w)))
    for blk, shape in blocks:
        yield blk.unit1.name, blk.unit1, shape
        yield blk.unit2.name, blk.unit2, (shape[0], blk.unit1.c_out) + shape[2:]


def analyze(model: LITFormer, input_shape: tuple[int, ...], name: str = "model") -> ComplexityReport:
    """Analytic report only (no forward pass)."""
    return ComplexityReport(name, tuple(input_shape), count_macs(model, input_shape))


def published_checks(input_shape: tuple[int, ...] = REFERENCE_INPUT, seed: int = 0) -> tuple[list[ComplexityReport], list[Check]]:
    """Build the full-size LIT-Former and (2+1)DUnet and compare against published totals."""
    cfg = ModelConfig()
    full = build(cfg, seed)
    unet = variant_2plus1d_unet(cfg, seed)
    reports = [analyze(full, input_shape, "LIT-Former"), analyze(unet, input_shape, "(2+1)DUnet")]
    checks = []
    for rep, key in zip(reports, ("litformer", "unet2plus1d")):
        target, tol = PUBLISHED_TARGETS[f"{key}_params"]
        checks.append(Check(f"{rep.model} params within {tol:.0%} of published", target, rep.total_params,
                            _within(rep.total_params, target, tol)))
        target, tol = PUBLISHED_TARGETS[f"{key}_macs"]
        checks.append(Check(f"{rep.model} MACs within {tol:.0%} of published at {input_shape}", target, rep.total_macs,
                            _within(rep.total_macs, target, tol), "see assumptions"))
    return reports, checks


def reduction_table(input_shape: tuple[int, ...] = REFERENCE_INPUT, cfg: Optional[ModelConfig] = None) -> list[dict]:
    """Attention-map MACs of full 3D attention vs eMSM at every encoder level."""
    cfg = cfg or ModelConfig()
    _, _, d, h, w = input_shape
    rows = []
    for level in range(1, cfg.levels + 1):
        c = cfg.channels(level - 1)
        lh, lw = h >> (level - 1), w >> (level - 1)
        full = attention_3d_formula(c, d, lh, lw)
        ours = attention_map_formula(c, d, lh, lw)
        rows.append({"level": level, "C": c, "D": d, "H": lh, "W": lw,
                     "attn3d_macs": full, "emsm_macs": ours, "ratio": full / ours})
    return rows


def table_rows(reports: list[ComplexityReport]) -> str:
    lines = [f"{'model':<14} {'Parms. [M]':>11} {'FLOPs [G]':>10}"]
    for r in reports:
        lines.append(f"{r.model:<14} {r.total_params / 1e6:>11.2f} {r.total_macs / 1e9:>10.2f}")
    return "\n".join(lines)
