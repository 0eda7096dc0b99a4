"""AdamW, the warmup-plus-cosine schedule, the training loop and checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml

from . import tensor as T
from .data import PatchPair, augment, extract_patches
from .errors import ConfigError, FormatError, NonFiniteError
from .network import LITFormer, ModelConfig, build
from .objectives import LossConfig, total_loss
from .tensor import Tensor

CKPT_MAGIC = b"LITCKPT1"
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 100
    lr_max: float = 2.0e-4
    lr_min: float = 1.0e-6
    warmup_epochs: float = 2
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1.0e-9
    batch_size: int = 2
    seed: int = 0
    steps_per_epoch: Optional[int] = None
    augment: bool = True
    log_every: int = 1
    checkpoint_every: int = 0
    patch: tuple[int, int, int] = (16, 64, 64)
    max_patches: Optional[int] = None

    def validate(self) -> None:
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"lr_min ({self.lr_min}) must be below lr_max ({self.lr_max})")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three positive extents, got {self.patch}")

    def total_steps(self, n_patches: int) -> int:
        return self.epochs * self.epoch_steps(n_patches)

    def epoch_steps(self, n_patches: int) -> int:
        return self.steps_per_epoch or max(1, math.ceil(n_patches / self.batch_size))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 over the warmup, then cosine down to ``lr_min`` at the last step."""
    warm = int(round(total_steps * cfg.warmup_epochs / cfg.epochs))
    if step < warm:
        return cfg.lr_max * step / warm
    if step == warm:
        return cfg.lr_max
    span = max(total_steps - 1 - warm, 1)
    t = min((step - warm) / span, 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS) + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype)


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``LITCKPT1``: magic, u32 manifest length, JSON manifest, float32 payload.

    The file is written to a temporary name and renamed into place, so an
    interrupted run always leaves the previous complete checkpoint behind.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:8]!r} in {path}", 0)
    if len(raw) < 12:
        raise FormatError(f"truncated checkpoint header in {path}", len(raw))
    (n,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + n:
        raise FormatError(f"truncated checkpoint manifest in {path}", len(raw))
    try:
        manifest = json.loads(raw[12 : 12 + n])
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint manifest in {path}: {exc}", 12) from exc
    base = 12 + n
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 4 * count > len(raw):
            raise FormatError(f"tensor {e['name']} runs past end of {path}", len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return arrays, manifest["meta"]


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def write_sidecar(path: Union[str, Path], model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig) -> Path:
    side = Path(f"{path}.yaml")
    doc = {"model": model_cfg.to_dict(), "train": _plain(asdict(train_cfg)), "loss": asdict(loss_cfg)}
    side.write_text(yaml.safe_dump(doc, sort_keys=False))
    return side


def model_from_checkpoint(path: Union[str, Path]) -> tuple[LITFormer, dict]:
    arrays, meta = load_checkpoint(path)
    model = build(ModelConfig.from_dict(meta["model"]), 0)
    named = dict(model.named_parameters())
    for name, p in named.items():
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint {path} lacks parameter {name}", 0)
        if arrays[key].shape != p.shape:
            raise FormatError(f"parameter {name} has shape {arrays[key].shape}, model expects {p.shape}", 0)
        p.data = arrays[key].copy()
    return model, meta


# training ------------------------------------------------------------------

@dataclass
class RunRecord:
    step: int
    epoch: int
    lr: float
    losses: dict[str, float]
    wall: float

    def to_line(self) -> str:
        return json.dumps(asdict(self))


def training_pairs(volumes: Sequence[tuple], cfg: TrainConfig) -> list[PatchPair]:
    """Patches from every ``(id, ldr, ndr)`` triple in seeded order, capped at ``max_patches``."""
    pairs: list[PatchPair] = []
    for _, ldr, ndr in volumes:
        pairs.extend(extract_patches(ldr, ndr, patch=tuple(cfg.patch), seed=cfg.seed))
        if cfg.max_patches and len(pairs) >= cfg.max_patches:
            break
    return pairs[: cfg.max_patches] if cfg.max_patches else pairs


def make_batch(pairs: Sequence[PatchPair], step: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batch for ``step``; depends only on (seed, step) so a resumed run sees the same data."""
    rng = np.random.default_rng([cfg.seed, step])
    k = min(cfg.batch_size, len(pairs))
    idx = rng.choice(len(pairs), size=k, replace=False)
    chosen = [augment(pairs[i], rng) if cfg.augment else pairs[i] for i in idx]
    x = np.stack([p.ldr for p in chosen])[:, None].astype(np.float32)
    y = np.stack([p.ndr for p in chosen])[:, None].astype(np.float32)
    return x, y


class Trainer:
    """Owns the model, the optimizer state and the step counter."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        loss_cfg: Optional[LossConfig] = None,
        pairs: Sequence[PatchPair] = (),
    ):
        train_cfg.validate()
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.loss_cfg = loss_cfg or LossConfig()
        self.loss_cfg.validate()
        self.pairs = list(pairs)
        if not self.pairs:
            raise ConfigError("training needs at least one patch pair")
        self.model = build(model_cfg, train_cfg.seed)
        self.params = dict(self.model.named_parameters())
        self.state = AdamState()
        self.step = 0
        self.total_steps = train_cfg.total_steps(len(self.pairs))
        self.epoch_steps = train_cfg.epoch_steps(len(self.pairs))

    def train_step(self) -> RunRecord:
        t0 = time.perf_counter()
        x, y = make_batch(self.pairs, self.step, self.cfg)
        lr = lr_at(self.step, self.total_steps, self.cfg)
        self.model.zero_grad()
        parts: dict[str, float] = {}
        try:
            loss = total_loss(self.model(Tensor(x)), Tensor(y), self.loss_cfg, parts)
            loss.backward()
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite value at step {self.step} (lr {lr:.3e}): {exc}") from exc
        if not math.isfinite(parts["total"]):
            raise NonFiniteError(f"loss is {parts['total']} at step {self.step} (lr {lr:.3e})")
        optimizer_step(
            {n: p.data for n, p in self.params.items()},
            {n: p.grad for n, p in self.params.items()},
            self.state,
            lr,
            self.cfg,
        )
        rec = RunRecord(self.step, self.step // self.epoch_steps, lr, parts, time.perf_counter() - t0)
        self.step += 1
        return rec

    def run(
        self,
        steps: Optional[int] = None,
        log: Optional[Callable[[RunRecord], None]] = None,
        checkpoint: Optional[Union[str, Path]] = None,
    ) -> list[RunRecord]:
        """Advance until ``steps`` (default: the scheduled total) have been taken."""
        end = self.total_steps if steps is None else min(steps, self.total_steps)
        history = []
        every = self.cfg.checkpoint_every
        while self.step < end:
            rec = self.train_step()
            history.append(rec)
            if log and (rec.step % self.cfg.log_every == 0 or self.step == end):
                log(rec)
            if checkpoint and every and self.step % every == 0:
                self.save(checkpoint)
        if checkpoint:
            self.save(checkpoint)
        return history

    def save(self, path: Union[str, Path]) -> None:
        arrays = {f"param/{n}": p.data for n, p in self.params.items()}
        arrays.update({f"adam_m/{n}": m for n, m in self.state.m.items()})
        arrays.update({f"adam_v/{n}": v for n, v in self.state.v.items()})
        meta = {
            "step": self.step,
            "adam_step": self.state.step,
            "model": self.model_cfg.to_dict(),
            "train": _plain(asdict(self.cfg)),
            "loss": asdict(self.loss_cfg),
        }
        save_checkpoint(path, arrays, meta)
        write_sidecar(path, self.model_cfg, self.cfg, self.loss_cfg)

    def load(self, path: Union[str, Path]) -> None:
        arrays, meta = load_checkpoint(path)
        for n, p in self.params.items():
            p.data = arrays[f"param/{n}"].copy()
        self.state = AdamState(
            step=int(meta["adam_step"]),
            m={n[7:]: a.copy() for n, a in arrays.items() if n.startswith("adam_m/")},
            v={n[7:]: a.copy() for n, a in arrays.items() if n.startswith("adam_v/")},
        )
        self.step = int(meta["step"])


def predict(model: LITFormer, ldr_normalized: np.ndarray) -> np.ndarray:
    """Run the model on one normalized ``D x H x W`` volume."""
    with T.no_grad():
        out = model(Tensor(np.asarray(ldr_normalized, dtype=np.float32)[None, None]))
    return out.data[0, 0]
