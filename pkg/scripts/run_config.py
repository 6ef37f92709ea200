"""
Run configuration document
One JSON document drives a whole run; loading is strict (unknown keys fail)
and `--set a.b=value` overrides apply on top.
"""

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from config import (
    CONTROLLER_HIDDEN, CONTROLLER_LR, CONTROLLER_TANH_CONSTANT, CONTROLLER_TEMPERATURE,
    DEFAULT_CHANNELS, DEFAULT_DISCRIMINATOR_STEPS, DEFAULT_GENERATOR_STEPS, DEFAULT_MULT_ADDS_LIMIT,
    ENTROPY_WEIGHT, REFERENCE_RESOLUTION, REWARD_EMA_DECAY, SURROGATE_GENERATOR_STEPS,
)
from errors import ConfigError
from sr_data import DatasetSpec
from trainer import DistortionConfig, GanConfig

EVALUATORS = ("real", "surrogate")
GATE_MODES = ("skip", "penalty")


@dataclass
class ControllerConfig:
    hidden: int = CONTROLLER_HIDDEN
    lr: float = CONTROLLER_LR
    tanh_constant: float = CONTROLLER_TANH_CONSTANT
    temperature: float = CONTROLLER_TEMPERATURE
    ema_decay: float = REWARD_EMA_DECAY
    entropy_weight: float = ENTROPY_WEIGHT

    def __post_init__(self):
        if self.hidden < 1 or self.temperature <= 0 or not 0 <= self.ema_decay < 1:
            raise ConfigError(f"Invalid controller config: {asdict(self)}")


@dataclass
class SearchConfig:
    steps: int = DEFAULT_GENERATOR_STEPS
    workers: int = 1
    evaluator: str = "real"
    gate_mode: str = "skip"
    mult_adds_limit: float = DEFAULT_MULT_ADDS_LIMIT       # generator only
    checkpoint_every: int = 10
    seed: int = 0
    size: int = 0                   # nodes / blocks of a reduced space; 0 = full
    num_ops: int = 0                # 0 = full op set
    num_redops: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"Search needs at least one step, got {self.steps}")
        if self.workers < 1:
            raise ConfigError(f"Search needs at least one worker, got {self.workers}")
        if self.evaluator not in EVALUATORS:
            raise ConfigError(f"evaluator must be one of {EVALUATORS}, got {self.evaluator!r}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.mult_adds_limit <= 0 or self.checkpoint_every < 1:
            raise ConfigError("mult_adds_limit and checkpoint_every must be positive")


def _default_discriminator_search() -> SearchConfig:
    return SearchConfig(steps=DEFAULT_DISCRIMINATOR_STEPS)


@dataclass
class RunConfig:
    seed: int = 0
    channels: int = DEFAULT_CHANNELS
    scales: List[int] = field(default_factory=lambda: [2])
    bottleneck: int = 0                     # discriminator bottleneck width m; 0 = none
    ref_resolution: List[int] = field(default_factory=lambda: list(REFERENCE_RESOLUTION))
    output_dir: Optional[str] = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    generator_search: SearchConfig = field(default_factory=SearchConfig)
    discriminator_search: SearchConfig = field(default_factory=_default_discriminator_search)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    distortion_proxy: DistortionConfig = field(default_factory=DistortionConfig.proxy)
    distortion_full: DistortionConfig = field(default_factory=DistortionConfig.full)
    gan_proxy: GanConfig = field(default_factory=GanConfig.proxy)
    gan_full: GanConfig = field(default_factory=GanConfig.full)

    def __post_init__(self):
        if not self.scales or any(s not in (2, 4) for s in self.scales) or sorted(self.scales) != self.scales:
            raise ConfigError(f"scales must be an ascending subset of [2, 4], got {self.scales}")
        if self.channels < 1 or self.channels % 4:
            raise ConfigError(f"channels must be a positive multiple of 4 (grouped convs), got {self.channels}")
        if self.dataset.scale != self.scales[0]:
            raise ConfigError(f"dataset.scale {self.dataset.scale} must equal the first search scale {self.scales[0]}")

    # ── (De)serialization ───────────────────────────────────────

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["dataset"]["textures"] = list(self.dataset.textures)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config {path} is not valid JSON: {e}")
        return cls.from_dict(data)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_overrides(self, assignments: Sequence[str]) -> "RunConfig":
        return RunConfig.from_dict(apply_overrides(self.to_dict(), assignments))

    @classmethod
    def smoke(cls) -> "RunConfig":
        """Surrogate-evaluator configuration for CI smoke runs"""
        return cls(
            dataset=DatasetSpec(seed=0, count_train=4, count_val=2, image_size=32, scale=2),
            generator_search=SearchConfig(steps=DEFAULT_GENERATOR_STEPS, evaluator="surrogate",
                                          checkpoint_every=50),
            discriminator_search=SearchConfig(steps=DEFAULT_DISCRIMINATOR_STEPS, evaluator="surrogate",
                                              checkpoint_every=25),
            distortion_full=DistortionConfig(epochs=1, batch=2, lr_patch=8, steps_per_epoch=2),
            gan_full=GanConfig(epochs=1, batch=2, hr_patch=32, feature_depth=3, steps_per_epoch=1),
        )

    @classmethod
    def surrogate(cls) -> "RunConfig":
        """Long surrogate searches (T_G=2500) with the default full-task training phases"""
        return cls(
            generator_search=SearchConfig(steps=SURROGATE_GENERATOR_STEPS, evaluator="surrogate", checkpoint_every=100),
            discriminator_search=SearchConfig(steps=DEFAULT_DISCRIMINATOR_STEPS, evaluator="surrogate"),
        )


def _coerce(kind, value: Any, where: str) -> Any:
    """Check one leaf value against its annotation; ints promote to float"""
    origin = typing.get_origin(kind)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item = typing.get_args(kind)[0]
        items = [_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
        value = tuple(items) if origin is tuple else items
    return value


def _build(cls, data: Any, path: str):
    """Recursively construct dataclass `cls` from `data`, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config key: {_join(path, unknown[0])}")
    kwargs = {}
    for name, value in data.items():
        kind = hints[name]
        where = _join(path, name)
        if dataclasses.is_dataclass(kind):
            value = _build(kind, value, where)
        else:
            value = _coerce(kind, value, where)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or '<root>'}: {e}")


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict[str, Any], assignments: Sequence[str]) -> Dict[str, Any]:
    """Apply `dotted.key=value` assignments; the value is JSON, else a plain string"""
    data = json.loads(json.dumps(data))
    for assignment in assignments:
        key, sep, raw = assignment.partition("=")
        if not sep or not key:
            raise ConfigError(f"Override must look like key=value, got {assignment!r}")
        parts = key.split(".")
        node = data
        for depth, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"Unknown config key: {'.'.join(parts[:depth + 1])}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"Unknown config key: {key}")
        node[parts[-1]] = _parse_value(raw)
    return data
