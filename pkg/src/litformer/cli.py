"""``litformer`` command: simulate, train, eval, gradcheck, analyze."""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import complexity as cx
from .config import RunConfig, dump_config, load_config
from .data import normalize, read_manifest, simulate_dataset, simulate_volumes
from .errors import ConfigError, FormatError, NonFiniteError
from .evaluation import evaluate_volumes, report_lines, trilinear_baseline
from .gradcheck import network_gradcheck
from .network import ModelConfig, build, micro_config, variant_2plus1d_unet
from .training import Trainer, model_from_checkpoint, predict, training_pairs

CHECKPOINT_NAME = "checkpoint.litckpt"
GRADCHECK_TOL = 1e-4


def _volumes(cfg: RunConfig, manifest: Optional[str] = None):
    path = manifest or cfg.manifest
    if path:
        return read_manifest(path)
    return list(simulate_volumes(cfg.data, cfg.seed))


def _emit(lines: Sequence[str], out: Optional[Path], name: str) -> None:
    for line in lines:
        print(line)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text("".join(line + "\n" for line in lines))


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = Path(args.out or "data")
    path = simulate_dataset(out, cfg.data, cfg.seed)
    print(json.dumps({"manifest": str(path), "volumes": cfg.data.n_volumes, "seed": cfg.seed}))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    pairs = training_pairs(_volumes(cfg, args.manifest), cfg.train)
    trainer = Trainer(cfg.model, cfg.train, cfg.loss, pairs)
    if args.checkpoint:
        trainer.load(args.checkpoint)
    ckpt = out / CHECKPOINT_NAME
    mode = "a" if args.checkpoint else "w"
    with open(out / "train_log.jsonl", mode) as log:
        def write(rec):
            line = rec.to_line()
            log.write(line + "\n")
            log.flush()
            print(line)

        history = trainer.run(steps=args.steps, log=write, checkpoint=ckpt)
    summary = {"checkpoint": str(ckpt), "steps": trainer.step, "patches": len(pairs)}
    if history:
        summary["first_loss"] = history[0].losses
        summary["last_loss"] = history[-1].losses
    print(json.dumps(summary))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    volumes = _volumes(cfg, args.manifest)
    out = Path(args.out) if args.out else None
    lines = []
    if args.checkpoint:
        model, meta = model_from_checkpoint(args.checkpoint)
        reports, hist = evaluate_volumes(volumes, lambda v: predict(model, normalize(v)).astype(np.float64))
        lines += report_lines("model", reports, hist)
        r = model.cfg.r
    else:
        r = cfg.model.r
    reports, hist = evaluate_volumes(volumes, lambda v: trilinear_baseline(v, r))
    lines += report_lines("trilinear", reports, hist)
    _emit(lines, out, "metrics.jsonl")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    model_cfg = cfg.model if args.config else micro_config()
    result = network_gradcheck(model_cfg, seed=cfg.seed, per_tensor=args.per_tensor)
    ok = result.passed(GRADCHECK_TOL)
    line = json.dumps({
        "max_rel_error": result.max_rel_error,
        "tolerance": GRADCHECK_TOL,
        "checked": result.checked,
        "worst": [result.worst[0], list(result.worst[1])],
        "passed": ok,
    })
    print(f"gradcheck: max rel err {result.max_rel_error:.3e} over {result.checked} entries "
          f"({'PASS' if ok else 'FAIL'}, tol {GRADCHECK_TOL:g})")
    _emit([line], Path(args.out) if args.out else None, "gradcheck.json")
    return 0 if ok else 1


def cmd_analyze(args, cfg: RunConfig) -> int:
    reports, claims = cx.published_checks(seed=cfg.seed)
    print(cx.table_rows(reports))
    # Informational only: the same totals if the 16-slice patch were the target, not the input.
    alt = (1, 1, cx.REFERENCE_INPUT[2] // 2) + cx.REFERENCE_INPUT[3:]
    variants = (("LIT-Former", build(ModelConfig(), cfg.seed)), ("(2+1)DUnet", variant_2plus1d_unet(ModelConfig(), cfg.seed)))
    for name, model in variants:
        print(f"# {name} at input {alt}: {cx.analyze(model, alt).total_macs / 1e9:.2f} G MACs (not checked)")
    print()
    micro = build(micro_config(), cfg.seed)
    formula = cx.verify_claims(micro, (1, 1, 4, 8, 8), "micro")
    checks = list(claims) + list(formula.formula_checks)
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.claim}: predicted={c.predicted:.6g} measured={c.measured:.6g} {c.note}".rstrip())
    print()
    for row in cx.reduction_table():
        print(f"level {row['level']}: 3D attention {row['attn3d_macs']:.4g} MACs, "
              f"eMSM {row['emsm_macs']:.4g} MACs, ratio {row['ratio']:.1f}")
    for a in cx.ASSUMPTIONS:
        print(f"# {a}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            (out / f"complexity_{rep.model.replace('(', '').replace(')', '').replace('+', 'p')}.json").write_text(rep.to_json() + "\n")
        doc = [{"claim": c.claim, "predicted": c.predicted, "measured": c.measured, "passed": c.passed, "note": c.note}
               for c in checks]
        (out / "checks.json").write_text(json.dumps(doc, indent=2) + "\n")
    failed = [c for c in checks if not c.passed]
    if failed:
        print(f"{len(failed)} of {len(checks)} checks failed", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-identical reruns")

    parser = argparse.ArgumentParser(prog="litformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic LDRCT/NDRCT dataset")
    p = sub.add_parser("train", parents=[common], help="train and write checkpoints plus a JSONL log")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--manifest", help="dataset manifest (default: simulate from the config)")
    p.add_argument("--steps", type=int, help="stop after this many total steps")
    p = sub.add_parser("eval", parents=[common], help="metrics for a checkpoint and the trilinear baseline")
    p.add_argument("--checkpoint", help="model checkpoint (omit for the baseline only)")
    p.add_argument("--manifest", help="dataset manifest (default: simulate from the config)")
    p = sub.add_parser("gradcheck", parents=[common], help="whole-network finite-difference check")
    p.add_argument("--per-tensor", type=int, default=4, help="entries probed per tensor")
    sub.add_parser("analyze", parents=[common], help="parameter/MAC counts and complexity claims")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        limits = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
        with limits:
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, FormatError, NonFiniteError, FileNotFoundError) as exc:
        print(f"litformer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
