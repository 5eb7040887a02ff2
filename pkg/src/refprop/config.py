"""Run configuration, flat `key = value` config files, and CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .objectives import LossCoefficients

PROMPT_MODES = ("full", "class-name-only", "none")


@dataclass
class RunConfig:
    data_dir: str = ""
    out_dir: str = ""
    epochs: int = 5
    lr: float = 1e-5
    lr_decay_epoch: int = 3
    lr_decay_factor: float = 0.1
    clip_length: int = 3
    n_queries: int = 5
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_dice: float = 5.0
    lambda_focal: float = 2.0
    lambda_cls: float = 2.0
    propagate_box: bool = True
    propagate_mask: bool = True
    propagate_query: bool = True
    prompt_mode: str = "full"
    seed: int = 0
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    clips_per_batch: int = 1
    augment: bool = True
    max_resize: int = 0  # 0 keeps native resolution; >0 resizes the long side
    checkpoint_every_epochs: int = 1
    resume: str = ""

    def validate(self) -> None:
        positive = (
            "epochs", "lr", "lr_decay_epoch", "lr_decay_factor", "clip_length",
            "n_queries", "clips_per_batch", "checkpoint_every_epochs",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        non_negative = (
            "lambda_l1", "lambda_giou", "lambda_dice", "lambda_focal", "lambda_cls",
            "seed", "weight_decay", "grad_clip", "max_resize",
        )
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ValidationError(f"config field {name} must be >= 0")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValidationError(
                f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}"
            )

    def coefficients(self) -> LossCoefficients:
        return LossCoefficients(
            l1=self.lambda_l1,
            giou=self.lambda_giou,
            dice=self.lambda_dice,
            focal=self.lambda_focal,
            cls=self.lambda_cls,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce_value(name: str, raw: str):
    """Parse a raw string into the declared type of a RunConfig field."""
    if name not in _FIELDS:
        raise ValidationError(f"unknown config key {name!r}")
    ftype = _FIELDS[name].type
    raw = raw.strip()
    if ftype in ("bool", bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValidationError(f"cannot parse boolean config value {name}={raw!r}")
    if ftype in ("int", int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ValidationError(f"cannot parse integer config value {name}={raw!r}") from exc
    if ftype in ("float", float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ValidationError(f"cannot parse float config value {name}={raw!r}") from exc
    return raw


def parse_config_file(path) -> dict:
    """Read a flat `key = value` file; '#' starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = coerce_value(key, raw)
    return values


def build_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values first, then CLI overrides on top."""
    values: dict = {}
    if file_path:
        values.update(parse_config_file(file_path))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = coerce_value(key, raw) if isinstance(raw, str) else raw
    config = RunConfig(**values)
    config.validate()
    return config


def write_config(config: RunConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
