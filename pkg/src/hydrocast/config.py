"""Run configuration: dataclasses, INI-style file parsing, canonical hashing."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields


class ConfigError(ValueError):
    """Malformed or unknown configuration input."""


@dataclass
class SyntheticConfig:
    years: float = 10.0
    start_date: str = "2000-01-01"
    base_level: float = 6.0
    event_rate: float = 1.0
    noise_scale: float = 1.0
    unlabeled_fraction: float = 0.15
    seed: int = 0


@dataclass
class DataConfig:
    window: int = 180            # input length L
    horizon: int = 30            # forecast length H
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    variance_days: int = 14      # trailing window for local runoff variance
    api_days: int = 30           # antecedent precipitation lag count
    api_decay: float = 0.9

    def validate(self) -> None:
        if self.window < 16:
            raise ConfigError("data.window must be at least 16 (patch length)")
        if self.horizon < 1:
            raise ConfigError("data.horizon must be positive")
        if not 0 < self.train_fraction < 1 or not 0 < self.val_fraction < 1 \
                or self.train_fraction + self.val_fraction >= 1:
            raise ConfigError("data split fractions must be in (0,1) and sum below 1")
        if not 0 < self.api_decay < 1:
            raise ConfigError("data.api_decay must lie in (0, 1)")


@dataclass
class ModelConfig:
    harmonics: int = 4
    period_init: float = 365.25
    period_min: float = 300.0
    period_max: float = 430.0
    seasonal_global_coefficients: bool = False
    use_decomposition: bool = True       # off: experts consume the raw window
    gating: str = "softmax"              # "softmax" or "uniform"
    active_expert: str = ""              # non-empty: single-expert variant
    residual_experts_enabled: bool = True  # off: forecast is trend+seasonal only
    covariates_enabled: bool = True
    foundation_enabled: bool = True
    foundation_seed: int = 90210
    init_seed: int = 7
    patch_length: int = 16
    patch_stride: int = 8
    patch_dim: int = 32
    attention_heads: int = 2
    lstm_hidden: int = 32
    dynnorm_dim: int = 16
    gate_hidden: int = 32
    embed_dim: int = 32

    def validate(self) -> None:
        if self.gating not in ("softmax", "uniform"):
            raise ConfigError(f"model.gating must be softmax or uniform, got {self.gating!r}")
        from .experts import EXPERT_NAMES
        if self.active_expert and self.active_expert not in EXPERT_NAMES:
            raise ConfigError(
                f"model.active_expert must be one of {EXPERT_NAMES}, got {self.active_expert!r}")
        if not self.period_min > 1:
            raise ConfigError("model.period_min must exceed 1")
        if self.period_min >= self.period_max:
            raise ConfigError("model.period_min must be below model.period_max")


@dataclass
class LossConfig:
    sup: float = 1.0
    mask: float = 0.3
    contrastive: float = 0.1
    consistency: float = 0.1
    pseudo: float = 0.2
    reg: float = 1.0
    gamma_base: float = 1.0
    gamma_extreme: float = 0.5
    gamma_nse: float = 0.25
    gamma_kge: float = 0.25
    mse_mix: float = 0.5             # alpha in the MSE+MAE base
    mae_mix: float = 0.5             # beta
    extreme_multiplier: float = 4.0  # eta, > 1
    contrastive_temperature: float = 0.1
    entropy_weight: float = 0.01
    l2_weight: float = 1e-5
    mask_fraction: float = 0.15
    noise_scale: float = 0.02        # augmentation noise, in units of window std
    crop_fraction: float = 0.9       # augmentation crop span

    def validate(self) -> None:
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if isinstance(v, float) and v < 0:
                raise ConfigError(f"losses.{f_.name} must be non-negative")
        if self.extreme_multiplier <= 1:
            raise ConfigError("losses.extreme_multiplier must exceed 1")
        if self.contrastive_temperature <= 0:
            raise ConfigError("losses.contrastive_temperature must be positive")
        if not 0 <= self.mask_fraction <= 1:
            raise ConfigError("losses.mask_fraction must lie in [0, 1]")
        if not 0 < self.crop_fraction <= 1:
            raise ConfigError("losses.crop_fraction must lie in (0, 1]")


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    batch_size: int = 64
    epochs: int = 200
    patience: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 5.0
    curriculum_start: float = 20.0
    curriculum_end: float = 60.0
    curriculum_epochs: int = 30
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.curriculum_start <= self.curriculum_end <= 100:
            raise ConfigError(
                "training curriculum percentiles must satisfy 0 <= start <= end <= 100")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("training.batch_size and training.epochs must be positive")


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.model.validate()
        self.losses.validate()
        self.training.validate()
        return self

    def canonical_lines(self) -> list[str]:
        lines = []
        for section, obj in sorted(asdict(self).items()):
            for key, value in sorted(obj.items()):
                lines.append(f"{section}.{key}={value!r}")
        return lines

    def hash(self) -> str:
        payload = "\n".join(self.canonical_lines()).encode()
        return hashlib.sha256(payload).hexdigest()

    def to_ini(self) -> str:
        out = []
        for section, obj in asdict(self).items():
            out.append(f"[{section}]")
            for key, value in obj.items():
                out.append(f"{key} = {value}")
            out.append("")
        return "\n".join(out)


_SECTIONS = {
    "synthetic": SyntheticConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "losses": LossConfig,
    "training": TrainConfig,
}


def _convert(raw: str, target_type: type, where: str):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {where}: {raw!r} (expected {target_type.__name__})") from None


def parse_config(text: str) -> RunConfig:
    """Parse the INI-style run configuration; unknown keys are errors."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f_.name: f_.type for f_ in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            ftype = {"int": int, "float": float, "str": str, "bool": bool}[known[key]] \
                if isinstance(known[key], str) else known[key]
            setattr(target, key, _convert(raw, ftype, f"{section}.{key}"))
    return cfg.validate()


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
