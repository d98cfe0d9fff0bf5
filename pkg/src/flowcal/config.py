"""Sectioned JSON experiment configuration with strict validation.

Every section maps onto a frozen dataclass.  Unknown keys, wrong types
and out-of-range values are all reported as :class:`ConfigError` before
anything runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_type_hints

from .correction import CorrectionConfig
from .physics import BornLiteSurvey, NoiseModel
from .prior import GeoPriorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    n_train: int = 2000
    n_val: int = 200

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("dataset split sizes must be >= 1")


@dataclass(frozen=True)
class FlowSection:
    n_layers: int = 8
    hidden: int = 16
    features: int = 64
    alpha: float = 2.0
    linear_skip: bool = True

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1 or self.features < 1:
            raise ValueError("flow layer count and widths must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class ScenarioSection:
    """The observation the correction and inference commands work on."""

    n_sources: int = 4
    noise_mult: float = 2.5
    truth_seed: int = 10_000
    shifted_prior: bool = False

    def __post_init__(self):
        if self.n_sources < 1:
            raise ValueError("scenario needs at least one source")
        if not self.noise_mult > 0:
            raise ValueError("noise multiplier must be positive")


@dataclass(frozen=True)
class InferenceSection:
    n_samples: int = 1000
    probes: tuple = ((6, 8), (9, 16), (12, 24))
    ci_level: float = 0.99
    bins: int = 50
    stabilizer: float = 0.05

    def __post_init__(self):
        if self.n_samples < 1 or self.bins < 1:
            raise ValueError("sample and bin counts must be >= 1")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must be in (0, 1)")
        if self.stabilizer < 0:
            raise ValueError("stabilizer must be >= 0")
        probes = tuple(tuple(int(v) for v in p) for p in self.probes)
        if any(len(p) != 2 for p in probes):
            raise ValueError("probes are (row, column) pairs")
        object.__setattr__(self, "probes", probes)


@dataclass(frozen=True)
class SweepSection:
    n_values: tuple = (4, 8, 16)
    multipliers: tuple = (1.5, 2.0, 2.5, 3.0)
    seeds: tuple = (0, 1, 2)
    min_fraction: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(v) for v in self.n_values))
        object.__setattr__(self, "multipliers", tuple(float(v) for v in self.multipliers))
        object.__setattr__(self, "seeds", tuple(int(v) for v in self.seeds))
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")
        if not 0 <= self.min_fraction <= 1:
            raise ValueError("min_fraction must be in [0, 1]")


@dataclass(frozen=True)
class SeedSection:
    data: int = 0
    flow_init: int = 0
    train: int = 0
    noise: int = 0
    correction: int = 0
    sampling: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"seed {f.name} must be non-negative")

    def override(self, seed: int) -> "SeedSection":
        return SeedSection(*([seed] * len(fields(self))))


SECTIONS: dict[str, type] = {
    "prior": GeoPriorConfig,
    "survey": BornLiteSurvey,
    "noise": NoiseModel,
    "dataset": DatasetSection,
    "flow": FlowSection,
    "train": TrainConfig,
    "correction": CorrectionConfig,
    "scenario": ScenarioSection,
    "inference": InferenceSection,
    "sweep": SweepSection,
    "seeds": SeedSection,
}
# seeds live in the seeds section only; the dataclass copies are filled from it
HIDDEN_FIELDS = {"survey": {"kernel_override"}, "train": {"seed"}, "correction": {"seed"}}


@dataclass(frozen=True)
class ExperimentConfig:
    prior: GeoPriorConfig = field(default_factory=GeoPriorConfig)
    survey: BornLiteSurvey = field(default_factory=BornLiteSurvey)
    noise: NoiseModel = field(default_factory=NoiseModel)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    flow: FlowSection = field(default_factory=FlowSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output: str = "runs"

    def __post_init__(self):
        if (self.prior.nz, self.prior.nx) != self.survey.shape:
            raise ConfigError("prior grid does not match survey grid")
        for r, c in self.inference.probes:
            if not (0 <= r < self.survey.nz and 0 <= c < self.survey.nx):
                raise ConfigError(f"probe ({r}, {c}) lies outside the grid")

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            for hidden in HIDDEN_FIELDS.get(name, ()):
                d.pop(hidden, None)
            out[name] = _plain(d)
        out["output"] = self.output
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seeds.train)

    def correction_config(self) -> CorrectionConfig:
        return replace(self.correction, seed=self.seeds.correction)

    def with_overrides(self, out: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, output=str(out))
        if seed is not None:
            cfg = replace(cfg, seeds=cfg.seeds.override(seed))
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value: Any, hint, where: str):
    text = str(hint)
    if hint is bool or text == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if hint is int or text == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float or text == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if text.startswith("tuple") or hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _section(name: str, cls: type, raw) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    hints = get_type_hints(cls)
    allowed = {f.name for f in fields(cls)} - HIDDEN_FIELDS.get(name, set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"output"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(name, cls, doc[name]) for name, cls in SECTIONS.items() if name in doc}
    if "output" in doc:
        if not isinstance(doc["output"], str) or not doc["output"]:
            raise ConfigError("output must be a non-empty path string")
        kwargs["output"] = doc["output"]
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(doc)
