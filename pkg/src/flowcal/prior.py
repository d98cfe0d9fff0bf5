"""Synthetic layered-reflectivity prior and (model, migrated image) training pairs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .physics import BornLiteSurvey, NoiseModel, rtm, simulate_observation

MANIFEST = "manifest.json"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPriorConfig:
    nz: int = 16
    nx: int = 32
    layers: tuple[int, int] = (2, 4)
    amplitude: tuple[float, float] = (0.3, 1.0)
    undulation_amp: tuple[float, float] = (0.0, 1.5)
    undulation_wavelength: tuple[float, float] = (12.0, 40.0)
    dip: tuple[float, float] = (-0.05, 0.05)
    water_rows: int = 2
    amp_cap: float = 1.0

    def __post_init__(self):
        for name in ("layers", "amplitude", "undulation_amp", "undulation_wavelength", "dip"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: {lo} > {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.layers[0] < 0:
            raise ValueError("layer count must be >= 0")
        if not 0 <= self.water_rows < self.nz:
            raise ValueError("water rows must be in [0, nz)")
        if self.undulation_wavelength[0] <= 0:
            raise ValueError("undulation wavelength must be positive")
        if self.amp_cap <= 0:
            raise ValueError("amplitude cap must be positive")

    def shifted(self) -> "GeoPriorConfig":
        """More layers, steeper dips and stronger undulation."""
        return replace(
            self,
            layers=(self.layers[0] + 1, self.layers[1] + 2),
            dip=(-0.35, 0.35),
            undulation_amp=(self.undulation_amp[0], self.undulation_amp[1] + 1.5),
            undulation_wavelength=(self.undulation_wavelength[0] * 0.5, self.undulation_wavelength[1] * 0.5),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeoPriorConfig":
        d = dict(d)
        for k in ("layers", "amplitude", "undulation_amp", "undulation_wavelength", "dip"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _interfaces(cfg: GeoPriorConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(cfg.layers[0], cfg.layers[1] + 1))
    cols = np.arange(cfg.nx, dtype=np.float64)
    top, bottom = cfg.water_rows, cfg.nz - 1
    depths = np.empty((n, cfg.nx))
    amps = np.empty(n)
    for k in range(n):
        base = rng.uniform(top, bottom)
        dip = rng.uniform(*cfg.dip)
        a = rng.uniform(*cfg.undulation_amp)
        wl = rng.uniform(*cfg.undulation_wavelength)
        phase = rng.uniform(0.0, 2 * np.pi)
        depths[k] = base + dip * (cols - cfg.nx / 2) + a * np.sin(2 * np.pi * cols / wl + phase)
        amps[k] = rng.choice((-1.0, 1.0)) * rng.uniform(*cfg.amplitude)
    return depths, amps


def sample_prior(cfg: GeoPriorConfig, seed, return_interfaces: bool = False):
    """Layered reflectivity image (nz, nx).

    Interfaces are smooth curves; each deposits its signed amplitude on
    the two rows bracketing its depth (linear split), clipped at
    ``amp_cap``.  Rows above ``water_rows`` stay zero.
    """
    rng = np.random.default_rng(seed)
    depths, amps = _interfaces(cfg, rng)
    image = np.zeros((cfg.nz, cfg.nx))
    cols = np.arange(cfg.nx)
    for d, a in zip(depths, amps):
        lo = np.floor(d).astype(int)
        frac = d - lo
        for row, w in ((lo, 1.0 - frac), (lo + 1, frac)):
            ok = (row >= cfg.water_rows) & (row < cfg.nz)
            np.add.at(image, (row[ok], cols[ok]), a * w[ok])
    np.clip(image, -cfg.amp_cap, cfg.amp_cap, out=image)
    image[: cfg.water_rows] = 0.0
    if return_interfaces:
        return image, depths
    return image


def mean_interface_slope(depths: np.ndarray) -> float:
    if depths.size == 0:
        return 0.0
    return float(np.mean(np.abs(np.diff(depths, axis=1))))


@dataclass
class TrainingPair:
    x: np.ndarray
    y_cond: np.ndarray
    seed: tuple[int, int]


def pair_seeds(seed: int, index: int) -> tuple[list[int], list[int]]:
    return [seed, index, 0], [seed, index, 1]


def make_pair(index: int, cfg: GeoPriorConfig, survey: BornLiteSurvey, noise: NoiseModel, seed: int) -> TrainingPair:
    prior_seed, noise_seed = pair_seeds(seed, index)
    x = sample_prior(cfg, prior_seed)
    y = rtm(survey, simulate_observation(x, survey, noise, noise_seed))
    return TrainingPair(x, y, (seed, index))


def make_dataset(
    n: int,
    cfg: GeoPriorConfig,
    survey: BornLiteSurvey,
    noise: NoiseModel,
    seed: int,
    offset: int = 0,
) -> list[TrainingPair]:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    if (cfg.nz, cfg.nx) != survey.shape:
        raise ValueError("prior grid does not match survey grid")
    return [make_pair(offset + k, cfg, survey, noise, seed) for k in range(n)]


def make_splits(n_train: int, n_val: int, cfg, survey, noise, seed: int):
    """Train and validation pairs with disjoint per-pair seeds."""
    train = make_dataset(n_train, cfg, survey, noise, seed)
    val = make_dataset(n_val, cfg, survey, noise, seed, offset=n_train)
    return train, val


def stack(pairs: list[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    """(n, D) model rows and (n, C) condition rows."""
    X = np.stack([p.x.reshape(-1) for p in pairs])
    Y = np.stack([p.y_cond.reshape(-1) for p in pairs])
    return X, Y


def config_hash(*parts) -> str:
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def save_dataset(path, train, val, meta: dict) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(meta)
    manifest["n_train"] = len(train)
    manifest["n_val"] = len(val)
    files = {}
    for split, pairs in (("train", train), ("val", val)):
        X = np.stack([p.x for p in pairs])
        Y = np.stack([p.y_cond for p in pairs])
        for tag, arr in (("x", X), ("y_cond", Y)):
            name = f"{split}_{tag}.npy"
            np.save(path / name, arr)
            files[name] = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
        manifest[f"{split}_seeds"] = [list(p.seed) for p in pairs]
    manifest["files"] = files
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _load_checked(path: Path, name: str, manifest: dict) -> np.ndarray:
    arr = np.load(path / name)
    expected = manifest.get("files", {}).get(name)
    if expected is not None and hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest() != expected:
        raise DatasetError(f"{name} does not match the hash recorded in the manifest")
    return arr


def load_dataset(path) -> tuple[list[TrainingPair], list[TrainingPair], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    out = []
    for split in ("train", "val"):
        X = _load_checked(path, f"{split}_x.npy", manifest)
        Y = _load_checked(path, f"{split}_y_cond.npy", manifest)
        seeds = manifest[f"{split}_seeds"]
        out.append([TrainingPair(x, y, tuple(s)) for x, y, s in zip(X, Y, seeds)])
    return out[0], out[1], manifest
