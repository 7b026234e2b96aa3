"""Training configuration and the flat ``key = value`` config file format.

Lines are ``key = value``; ``#`` starts a comment; keys are the
:class:`TrainConfig` field names. Booleans accept true/false/1/0/yes/no.
Named presets live in ``onenet/presets/<name>.cfg``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

PRESET_DIR = Path(__file__).parent / "presets"
FLAG_NAMES = ("no_distill", "no_sharing", "no_gating", "kl_backprop_teacher")


@dataclass
class TrainConfig:
    epochs: int = 20
    aux_branches: int = 2
    temperature: float = 3.0
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    no_distill: bool = False
    no_sharing: bool = False
    no_gating: bool = False
    kl_backprop_teacher: bool = False
    dataset: str = "mnist"
    data_root: str = ""
    train_subset: int = 0
    test_subset: int = 0
    augment: bool = False
    crop_pad: int = 4
    hflip: bool = True
    trunk: str = "conv:8,maxpool:2,conv:16,maxpool:2"
    branch: str = "conv:32,gap,linear"
    teacher_trunk: str = "conv:16,maxpool:2,conv:32,maxpool:2"
    teacher_branch: str = "conv:64,gap,linear"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.aux_branches < 1:
            raise ConfigError(f"aux_branches must be >= 1, got {self.aux_branches}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("base_lr and weight_decay must be >= 0 and momentum in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def coerce(key: str, value):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key} ({kind}): {value!r}") from exc
    return text


def parse_config_text(text: str, source: str = "<string>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def preset_names() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))


def load_preset(name: str) -> dict:
    path = PRESET_DIR / f"{name}.cfg"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return load_config_file(path)


def resolve_config(preset: str | None = None, config_file=None, overrides: dict | None = None) -> TrainConfig:
    """Preset, then config file, then explicit overrides (later wins)."""
    values: dict = {}
    if preset:
        values.update(load_preset(preset))
    if config_file:
        values.update(load_config_file(config_file))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    return TrainConfig(**values)
