"""Training configuration: one flat dataclass, a text format, a digest.

The on-disk format is deliberately dumb: `key = value` lines, `#`
comments, nothing nested. Every knob a run depends on lives here so
that the sha256 digest of the canonical serialization identifies the
run; file paths never enter the config, which keeps digests portable
across machines.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .data import Perturbation
from .models import ModelSpec

MODES = ("FS", "MT", "KD", "ACT")


class ConfigError(ValueError):
    """A config file or value violates the schema."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ACT"
    student_layers: int = 4
    student_width: int = 16
    teacher_layers: int = 6
    teacher_width: int = 64
    in_channels: int = 1
    num_classes: int = 4
    input_side: int = 256
    lambda_kd: float = 0.5
    lambda_co: float = 0.5
    temperature: float = 20.0
    dice_smooth: float = 1e-5
    ema_decay: float = 0.99
    ema_rampup: bool = False
    base_lr: float = 0.01
    momentum: float = 0.9
    t_max: int = 30000
    labeled_batch: int = 10
    unlabeled_batch: int = 10
    noise_sigma: float = 0.1
    flip_prob: float = 0.5
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.t_max < 1:
            raise ConfigError("t_max must be at least 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.labeled_batch < 1:
            raise ConfigError("labeled_batch must be at least 1")
        if self.unlabeled_batch < 0:
            raise ConfigError("unlabeled_batch must be non-negative")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("eval_every and checkpoint_every must be non-negative")
        # Loss weights and perturbation constants validate themselves;
        # constructing them here surfaces their errors at config time.
        self.loss_weights()
        self.perturbation()
        self.student_spec()

    def student_spec(self) -> ModelSpec:
        return ModelSpec(
            num_encoder_layers=self.student_layers,
            initial_channels=self.student_width,
            in_channels=self.in_channels,
            num_classes=self.num_classes,
            input_side=self.input_side,
        )

    def teacher_spec(self) -> ModelSpec:
        return ModelSpec(
            num_encoder_layers=self.teacher_layers,
            initial_channels=self.teacher_width,
            in_channels=self.in_channels,
            num_classes=self.num_classes,
            input_side=self.input_side,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_kd=self.lambda_kd,
            lambda_co=self.lambda_co,
            temperature=self.temperature,
            dice_smooth=self.dice_smooth,
        )

    def perturbation(self) -> Perturbation:
        return Perturbation(
            noise_sigma=self.noise_sigma,
            flip_prob=self.flip_prob,
            rotations=self.rotations,
        )


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field_type: str, raw: str, key: str):
    try:
        if field_type == "int":
            return int(raw)
        if field_type == "float":
            return float(raw)
        if field_type == "bool":
            if raw not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw == "true"
        if field_type.startswith("tuple"):
            if not raw.strip():
                return ()
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def config_to_text(config: TrainConfig) -> str:
    """Canonical serialization, one line per field in declaration order."""
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    field_types = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in field_types:
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate config key {key!r}")
        values[key] = _parse_value(field_types[key], raw, key)
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return config_from_text(path.read_text())


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(config))


def config_digest(config: TrainConfig) -> str:
    """sha256 over the canonical text; identifies the run's hyperparameters."""
    return hashlib.sha256(config_to_text(config).encode()).hexdigest()
