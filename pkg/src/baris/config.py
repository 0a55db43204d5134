"""Run configuration: flat ``key = value`` files with ``[section]`` headers.

Every field has a default, unknown sections or keys are errors that carry
the file line, and the resolved configuration round-trips through JSON.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .harness.backbone import BackboneConfig, EraSettings
from .harness.data import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 2e-3
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    seed: int = 0
    loss: str = "ce_only"
    freeze: str = "none"
    warmup_fraction: float = 0.1
    decay_fractions: tuple = ()  # e.g. (8 / 12, 11 / 12) for step decay
    decay_factor: float = 0.1
    max_steps: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"
    eval_batch_size: int = 50
    box_margin: int = 2

    def validate(self) -> None:
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.loss not in ("ce_only", "ce_plus_bace"):
            raise ConfigError(f"loss must be 'ce_only' or 'ce_plus_bace', got {self.loss!r}")
        if self.freeze not in ("none", "era"):
            raise ConfigError(f"freeze must be 'none' or 'era', got {self.freeze!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class BaceSettings:
    scale: int = 4
    lam: float = 1.0
    pool: str = "max"


@dataclass
class DataConfig:
    path: str = ""
    val_fraction: float = 0.2


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    era: EraSettings = field(default_factory=EraSettings)
    bace: BaceSettings = field(default_factory=BaceSettings)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def validate(self) -> None:
        self.train.validate()
        if self.train.freeze == "era" and not self.era.enabled:
            raise ConfigError("freeze = era requires adapters: set [era] enabled = true (or pass --era)")
        if self.bace.pool not in ("max", "avg"):
            raise ConfigError(f"bace pool must be 'max' or 'avg', got {self.bace.pool!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


SECTIONS = [f.name for f in dataclasses.fields(RunConfig)]


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.strip("()[]").split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw.strip('"').strip("'")
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def set_value(cfg: RunConfig, section: str, key: str, raw, where: str = "override") -> None:
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    sub = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(sub)}
    if key not in names:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    default = getattr(sub, key)
    if isinstance(raw, str):
        value = _convert(raw, default, where)
    elif isinstance(default, float) and isinstance(raw, int) and not isinstance(raw, bool):
        value = float(raw)
    else:
        value = raw
    setattr(sub, key, tuple(value) if isinstance(default, tuple) else value)


def parse_text(text: str, source: str = "<config>", cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped or stripped.startswith(";"):
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any [section]")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        set_value(cfg, section, key, raw, where)
    return cfg


def from_dict(d: dict, source: str = "<json>") -> RunConfig:
    cfg = RunConfig()
    for section, values in d.items():
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: section {section!r} must be an object")
        for key, value in values.items():
            set_value(cfg, section, key, value, f"{source}: [{section}]")
    return cfg


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    if p.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}:{exc.lineno}: {exc.msg}") from exc
        return from_dict(data, str(p))
    return parse_text(text, str(p))
