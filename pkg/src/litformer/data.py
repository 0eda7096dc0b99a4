"""Synthetic LDRCT/NDRCT pairs, HU windowing, patching, augmentation and I/O."""

from __future__ import annotations

import itertools
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .errors import ContractError, FormatError

HU_MIN, HU_MAX = -1024.0, 3071.0
WINDOW_LO, WINDOW_HI = -1000.0, 2000.0
AIR = -1000.0

MAGIC = b"LITVOL01"
_HEADER = struct.Struct("<8sIIII3f")
DTYPE_FLOAT32 = 0

AUGMENTATIONS = ("identity", "hflip", "rot90", "rot180", "rot270")


@dataclass
class Volume:
    """HU grid ``(D, H, W)`` with ``(slice interval, pixel, pixel)`` spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ContractError(f"volume data must be D x H x W, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class DegradeConfig:
    depth_factor: int = 2
    noise_sigma_hu: float = 25.0
    seed: int = 0

    def validate(self) -> None:
        if self.depth_factor < 2:
            raise ContractError(f"depth_factor must be >= 2, got {self.depth_factor}")
        if self.noise_sigma_hu < 0:
            raise ContractError("noise_sigma_hu must be >= 0")


# phantoms ------------------------------------------------------------------

def make_phantom(seed: int, D: int, H: int, W: int, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Overlapping random ellipsoids on an air background.

    A soft-tissue body ellipsoid (with a gentle linear ramp) holds smaller
    soft-tissue and bone ellipsoids.  Everything outside the body is exactly
    -1000 HU.
    """
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, D), np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij"
    )
    vol = np.full((D, H, W), AIR)
    body = (x / rng.uniform(0.75, 0.9)) ** 2 + (y / rng.uniform(0.6, 0.8)) ** 2 <= 1.0
    ramp = rng.uniform(-15, 15) * x + rng.uniform(-15, 15) * y + rng.uniform(-10, 10) * z
    vol[body] = rng.uniform(30.0, 60.0) + ramp[body]

    for _ in range(rng.integers(6, 11)):
        center = rng.uniform([-0.6, -0.45, -0.55], [0.6, 0.45, 0.55])
        axes = rng.uniform([0.2, 0.06, 0.06], [0.9, 0.3, 0.3])
        theta = rng.uniform(0, np.pi)
        xr = (x - center[2]) * np.cos(theta) + (y - center[1]) * np.sin(theta)
        yr = -(x - center[2]) * np.sin(theta) + (y - center[1]) * np.cos(theta)
        inside = ((z - center[0]) / axes[0]) ** 2 + (yr / axes[1]) ** 2 + (xr / axes[2]) ** 2 <= 1.0
        inside &= body
        if rng.random() < 0.35:
            level = rng.uniform(400.0, 1000.0)
        else:
            level = rng.uniform(0.0, 100.0)
        vol[inside] = level + 0.3 * ramp[inside]

    return Volume(np.clip(vol, HU_MIN, HU_MAX), spacing)


def degrade(v: Volume, cfg: DegradeConfig) -> Volume:
    """Average disjoint groups of ``depth_factor`` slices, then add Gaussian noise."""
    cfg.validate()
    r = cfg.depth_factor
    d, h, w = v.shape
    if d % r:
        raise ContractError(f"depth_factor {r} does not divide depth {d}")
    avg = v.data.astype(np.float64).reshape(d // r, r, h, w).mean(axis=1)
    if cfg.noise_sigma_hu > 0:
        avg = avg + np.random.default_rng(cfg.seed).normal(0.0, cfg.noise_sigma_hu, size=avg.shape)
    spacing = (v.spacing[0] * r, v.spacing[1], v.spacing[2])
    return Volume(avg, spacing)


# windowing -----------------------------------------------------------------

def normalize(data: Union[Volume, np.ndarray]) -> np.ndarray:
    """Clamp to [-1000, 2000] HU and map affinely to [0, 1] (float64)."""
    arr = data.data if isinstance(data, Volume) else np.asarray(data)
    arr = np.clip(arr.astype(np.float64), WINDOW_LO, WINDOW_HI)
    return (arr - WINDOW_LO) / (WINDOW_HI - WINDOW_LO)


def denormalize(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) * (WINDOW_HI - WINDOW_LO) + WINDOW_LO


# patches -------------------------------------------------------------------

@dataclass
class PatchPair:
    ldr: np.ndarray
    ndr: np.ndarray
    origin: tuple[int, int, int] = (0, 0, 0)
    augmentation: str = "identity"


def window_starts(extent: int, size: int, stride: int) -> list[int]:
    """Sliding-window origins; the last window is clamped to the far edge."""
    if size > extent:
        raise ContractError(f"patch extent {size} exceeds volume extent {extent}")
    if stride < 1:
        raise ContractError("stride must be positive")
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def depth_ratio(ldr: Volume, ndr: Volume) -> int:
    if ldr.shape[1:] != ndr.shape[1:]:
        raise ContractError(f"transverse extents differ: {ldr.shape[1:]} vs {ndr.shape[1:]}")
    r, rem = divmod(ndr.shape[0], ldr.shape[0])
    if rem or r < 1:
        raise ContractError(f"NDRCT depth {ndr.shape[0]} is not a multiple of LDRCT depth {ldr.shape[0]}")
    return r


def extract_patches(
    ldr: Volume,
    ndr: Volume,
    patch: tuple[int, int, int] = (16, 64, 64),
    stride: Optional[tuple[int, int, int]] = None,
    seed: int = 0,
) -> Iterator[PatchPair]:
    """Yield aligned patch pairs in a seed-determined order.

    The NDRCT patch covers the same anatomy with ``r`` times as many slices.
    Values are returned normalized to [0, 1].
    """
    r = depth_ratio(ldr, ndr)
    stride = stride or patch
    grids = [window_starts(e, p, s) for e, p, s in zip(ldr.shape, patch, stride)]
    origins = list(itertools.product(*grids))
    order = np.random.default_rng(seed).permutation(len(origins))
    lo_n, hi_n = normalize(ldr), normalize(ndr)
    pd, ph, pw = patch
    for i in order:
        z, y, x = origins[i]
        yield PatchPair(
            ldr=lo_n[z : z + pd, y : y + ph, x : x + pw],
            ndr=hi_n[z * r : (z + pd) * r, y : y + ph, x : x + pw],
            origin=(z, y, x),
        )


def apply_augmentation(arr: np.ndarray, name: str) -> np.ndarray:
    """Transverse-only dihedral transform on the last two axes."""
    if name == "identity":
        return arr
    if name == "hflip":
        return arr[..., ::-1].copy()
    if name in ("rot90", "rot180", "rot270"):
        return np.rot90(arr, k=int(name[3:]) // 90, axes=(-2, -1)).copy()
    raise ValueError(f"unknown augmentation {name!r}")


def augment(pair: PatchPair, seed) -> PatchPair:
    """Apply one randomly chosen transform identically to input and target."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    name = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
    return PatchPair(apply_augmentation(pair.ldr, name), apply_augmentation(pair.ndr, name), pair.origin, name)


# LITVOL01 ------------------------------------------------------------------

def write_volume(path: Union[str, Path], v: Volume) -> None:
    d, h, w = v.shape
    header = _HEADER.pack(MAGIC, d, h, w, DTYPE_FLOAT32, *v.spacing)
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(header + payload)
    os.replace(tmp, path)


def read_volume(path: Union[str, Path]) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r} in {path}", 0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header in {path}", len(raw))
    _, d, h, w, dtype, *spacing = _HEADER.unpack_from(raw)
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unknown dtype flag {dtype} in {path}", 20)
    n = d * h * w * 4
    if len(raw) - _HEADER.size < n:
        raise FormatError(f"payload needs {n} bytes, found {len(raw) - _HEADER.size} in {path}", len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=d * h * w, offset=_HEADER.size).reshape(d, h, w)
    return Volume(data.astype(np.float32), tuple(spacing))


# datasets ------------------------------------------------------------------

@dataclass
class SimulationConfig:
    n_volumes: int = 4
    shape: tuple[int, int, int] = (32, 64, 64)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    spacing: tuple[float, float, float] = (1.0, 0.7, 0.7)


def simulate_volumes(cfg: SimulationConfig, seed: int) -> Iterator[tuple[str, Volume, Volume]]:
    """Yield ``(id, ldr, ndr)`` triples; volume ``i`` depends only on ``(seed, i)``."""
    for i in range(cfg.n_volumes):
        ndr = make_phantom(seed * 1000 + i, *cfg.shape, spacing=cfg.spacing)
        deg = DegradeConfig(cfg.degrade.depth_factor, cfg.degrade.noise_sigma_hu, seed * 1000 + i + 500)
        yield f"vol{i:03d}", degrade(ndr, deg), ndr


def simulate_dataset(out_dir: Union[str, Path], cfg: SimulationConfig, seed: int) -> Path:
    """Write NDRCT/LDRCT volume pairs plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for vid, ldr, ndr in simulate_volumes(cfg, seed):
        write_volume(out / f"{vid}_ndr.litvol", ndr)
        write_volume(out / f"{vid}_ldr.litvol", ldr)
        pairs.append({"id": vid, "ldr": f"{vid}_ldr.litvol", "ndr": f"{vid}_ndr.litvol"})
    manifest = {
        "pairs": pairs,
        "noise_model": "image-domain additive Gaussian (simplified)",
        "depth_factor": cfg.degrade.depth_factor,
        "noise_sigma_hu": cfg.degrade.noise_sigma_hu,
        "seed": seed,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> list[tuple[str, Volume, Volume]]:
    """Load ``(id, ldr, ndr)`` triples; paths are relative to the manifest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    out = []
    for entry in doc["pairs"]:
        out.append((entry["id"], read_volume(path.parent / entry["ldr"]), read_volume(path.parent / entry["ndr"])))
    return out
