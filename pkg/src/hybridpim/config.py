"""Experiment configuration: YAML or JSON, strict schema, versioned."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrainSection:
    epochs: int = 30
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float | None = None
    min_accuracy: float = 0.0


@dataclass
class SensitivitySection:
    n_pairs: int = 5
    aggregation: str = "sum"
    samples: int = 500          # training samples used for the Hessian
    method: str = "block"
    max_iter: int = 200
    tol: float = 1e-2
    eps: float = 1e-5


@dataclass
class NoiseSection:
    sigma_analog: float = 0.5
    sigma_digital: float = 0.1


@dataclass
class SelectionSection:
    acc_desired: float = 0.02
    target: str = "drop"
    trials: int = 5
    validation_trials: int = 50
    max_fraction: float = 0.5
    fixed_noise: bool = False
    protect_first_last: bool = False
    step: int = 1


@dataclass
class QuantSection:
    n1: int = 6
    n2: int = 8
    act_bits: int = 8
    accum: str = "exact"


@dataclass
class CrossbarSection:
    rows: int = 128
    cols: int = 128
    bits_per_cell: int = 2
    input_bits_per_cycle: int = 1
    active_rows: int = 128
    mapping: str = "offset"
    encoding_saves_bit: bool = True
    sigma: float = 0.0
    adc_bits: int | None = None


@dataclass
class DigitalSection:
    fill_cycles: int = 12
    tiles: int = 1


@dataclass
class CostSection:
    table: str | None = None           # path to a YAML/JSON cost table; None: synthetic
    adc_area_share: float = 0.30
    adc_power_share: float = 0.50
    digital_tiles: int = 16


@dataclass
class SweepSection:
    axes: dict = field(default_factory=lambda: {"adc_bits": [9, 8, 7, 6]})
    trials: int = 5
    mode: str = "auto"   # auto | crossbar | weight


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    preset: str = "cnn-small"
    model: str | None = None       # path to a saved model; None: train the preset
    dataset: str | None = None     # directory with train/calibration/evaluation .hpim files
    eval_samples: int | None = None
    train: TrainSection = field(default_factory=TrainSection)
    sensitivity: SensitivitySection = field(default_factory=SensitivitySection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    quant: QuantSection = field(default_factory=QuantSection)
    crossbar: CrossbarSection = field(default_factory=CrossbarSection)
    digital: DigitalSection = field(default_factory=DigitalSection)
    cost: CostSection = field(default_factory=CostSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


SWEEP_AXES = ("adc_bits", "active_rows", "protected_fraction", "r_ratio", "sigma_analog")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _check(cfg: ExperimentConfig):
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"config version {cfg.version} unsupported (expected {CONFIG_VERSION})")
    if cfg.sensitivity.aggregation not in ("sum", "max", "mean", "mse"):
        raise ConfigError("sensitivity.aggregation must be sum, max, mean or mse")
    if cfg.sensitivity.method not in ("block", "deflation"):
        raise ConfigError("sensitivity.method must be 'block' or 'deflation'")
    if cfg.selection.target not in ("absolute", "drop"):
        raise ConfigError("selection.target must be 'absolute' or 'drop'")
    if cfg.quant.accum not in ("exact", "fp16"):
        raise ConfigError("quant.accum must be 'exact' or 'fp16'")
    if cfg.crossbar.mapping not in ("offset", "differential"):
        raise ConfigError("crossbar.mapping must be 'offset' or 'differential'")
    if cfg.sweep.mode not in ("auto", "crossbar", "weight"):
        raise ConfigError("sweep.mode must be auto, crossbar or weight")
    bad = sorted(set(cfg.sweep.axes) - set(SWEEP_AXES))
    if bad:
        raise ConfigError(f"sweep.axes: unknown axis {bad}; allowed: {list(SWEEP_AXES)}")
    for k, v in cfg.sweep.axes.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"sweep.axes.{k} must be a non-empty list")


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config")
    _check(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    return from_dict(data or {})


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
