"""Run configuration: a JSON document with one section per pipeline stage.

Every field has a default except the top-level ``seed``.  Unknown keys at any
level are rejected so that typos fail loudly instead of silently falling back
to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .diffusion import LOSS_WEIGHTINGS
from .dps import REDUCTIONS
from .errors import ConfigError
from .synthdata import GeneratorConfig, PLACEMENTS


@dataclass
class DatasetSection:
    H: int = 38
    W: int = 24
    sigma_y: float = 300.0
    E: float = 200000.0
    ramberg_alpha: float = 0.002
    ramberg_n: float = 5.0
    bumps: int = 4
    frames: int = 20
    histories: int = 110
    test_histories: int = 10
    band_width: float = 0.18
    load_rate: float = 3.0

    def generator(self, seed: int) -> GeneratorConfig:
        return GeneratorConfig(**asdict(self), seed=seed)


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class ScoreNetSection:
    base_channels: int = 32
    channel_mults: list = field(default_factory=lambda: [1, 2, 4])
    time_dim: int = 64
    groups: int = 8
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    loss_weighting: str = "noise"


@dataclass
class SurrogateSection:
    hidden: int = 100
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    val_fraction: float = 0.1
    output_relu: bool = False
    weight_decay: float = 0.0


@dataclass
class DPSSection:
    forward_model: str = "DS"
    T: int = 500
    zeta: float = 5.0
    M: int = 20
    n_sensors: int = 15
    placement: str = "standard"
    snr_db: float | None = None
    mode: str = "full"
    score_weight: float = 1.0
    reduction: str = "mean"
    n_test: int = 50
    chunk: int = 250


@dataclass
class SweepSection:
    axis: str = "sensor_count"
    values: list = field(default_factory=lambda: [0, 4, 15])
    repeats: int = 1


SECTIONS = {
    "dataset": DatasetSection,
    "schedule": ScheduleSection,
    "scorenet": ScoreNetSection,
    "surrogate": SurrogateSection,
    "dps": DPSSection,
    "sweep": SweepSection,
}


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    scorenet: ScoreNetSection = field(default_factory=ScoreNetSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    dps: DPSSection = field(default_factory=DPSSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.dps.forward_model.upper() not in ("DS", "CS", "NN"):
            raise ConfigError(f"unknown forward model {self.dps.forward_model!r}")
        if self.dps.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.dps.placement!r}")
        if self.dps.reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {self.dps.reduction!r}")
        if self.scorenet.loss_weighting not in LOSS_WEIGHTINGS:
            raise ConfigError(f"unknown loss weighting {self.scorenet.loss_weighting!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def config_from_dict(data: dict, seed: int | None = None) -> RunConfig:
    """Validate a parsed document; ``seed`` overrides the document's seed."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if seed is None:
        if "seed" not in data:
            raise ConfigError("config must set 'seed'")
        seed = data["seed"]
    sections = {name: _section(name, cls, data.get(name, {})) for name, cls in SECTIONS.items()}
    try:
        return RunConfig(seed=seed, **sections)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data, seed)
