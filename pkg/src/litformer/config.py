"""YAML run configurations shared by the command-line entry points."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .data import DegradeConfig, SimulationConfig
from .errors import ConfigError
from .network import ModelConfig
from .objectives import LossConfig
from .training import TrainConfig

SECTIONS = ("seed", "manifest", "data", "model", "train", "loss")


@dataclass
class RunConfig:
    seed: int = 0
    manifest: Optional[str] = None
    data: SimulationConfig = field(default_factory=SimulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        out = dataclasses.replace(self, seed=seed)
        out.train = dataclasses.replace(self.train, seed=seed)
        return out


def _build(cls, doc: Optional[dict], what: str):
    doc = dict(doc or {})
    known = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(doc) - known)
    if extra:
        raise ConfigError(f"unknown {what} keys: {extra}")
    for f in dataclasses.fields(cls):
        if f.name in doc and isinstance(doc[f.name], list):
            doc[f.name] = tuple(doc[f.name])
    return cls(**doc)


def _data_config(doc: Optional[dict]) -> SimulationConfig:
    doc = dict(doc or {})
    degrade = DegradeConfig(
        depth_factor=int(doc.pop("depth_factor", 2)),
        noise_sigma_hu=float(doc.pop("noise_sigma_hu", 25.0)),
    )
    cfg = _build(SimulationConfig, doc, "data")
    cfg.degrade = degrade
    return cfg


def parse_config(doc: dict[str, Any]) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    extra = sorted(set(doc) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown config sections: {extra}")
    seed = int(doc.get("seed", 0))
    try:
        model = ModelConfig.from_dict(doc.get("model") or {})
    except TypeError as exc:
        raise ConfigError(f"bad model section: {exc}") from exc
    cfg = RunConfig(
        seed=seed,
        manifest=doc.get("manifest"),
        data=_data_config(doc.get("data")),
        model=model,
        train=_build(TrainConfig, doc.get("train"), "train"),
        loss=_build(LossConfig, doc.get("loss"), "loss"),
    )
    cfg = cfg.with_seed(seed)
    cfg.model.validate()
    cfg.train.validate()
    cfg.loss.validate()
    return cfg


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Read a YAML config; ``None`` gives the defaults.  Relative manifests resolve against the file."""
    if path is None:
        return parse_config({})
    path = Path(path)
    doc = yaml.safe_load(path.read_text()) or {}
    cfg = parse_config(doc)
    if cfg.manifest and not Path(cfg.manifest).is_absolute():
        cfg.manifest = str(path.parent / cfg.manifest)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    data = {
        "n_volumes": cfg.data.n_volumes,
        "shape": list(cfg.data.shape),
        "spacing": list(cfg.data.spacing),
        "depth_factor": cfg.data.degrade.depth_factor,
        "noise_sigma_hu": cfg.data.degrade.noise_sigma_hu,
    }
    train = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg.train).items()}
    doc = {
        "seed": cfg.seed,
        "manifest": cfg.manifest,
        "data": data,
        "model": cfg.model.to_dict(),
        "train": train,
        "loss": dataclasses.asdict(cfg.loss),
    }
    return yaml.safe_dump(doc, sort_keys=False)
