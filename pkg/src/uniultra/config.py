"""Run configuration: dataclasses with strict JSON loading.

Unknown keys and wrongly typed values are rejected before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

DIRECTIONS = ("horizontal", "vertical", "right_diagonal", "left_diagonal")
LEVELS = ("D1", "D2", "D3")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one encoder + prompt decoder."""

    image_size: int = 64
    patch_size: int = 4
    stage_dims: tuple[int, ...] = (32, 64, 128)
    num_blocks: tuple[int, ...] = (1, 1, 1)
    num_heads: tuple[int, ...] = (2, 2, 4)
    mlp_ratio: int = 4
    adapter_dim: int = 16
    edge_dim: int = 16
    edge_directions: tuple[str, ...] = DIRECTIONS
    adapter_input: str = "block_input"
    use_adapters: bool = True
    decoder_heads: int = 4
    decoder_layers: int = 2

    def __post_init__(self):
        if len(self.stage_dims) != 3 or len(self.num_blocks) != 3 or len(self.num_heads) != 3:
            raise ConfigError("exactly three stages are required")
        if any(b < a for a, b in zip(self.stage_dims, self.stage_dims[1:])):
            raise ConfigError(f"stage dims must be non-decreasing: {self.stage_dims}")
        for d, h in zip(self.stage_dims, self.num_heads):
            if d % h:
                raise ConfigError(f"stage dim {d} not divisible by {h} heads")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if (self.image_size // self.patch_size) % 4:
            raise ConfigError("token grid must be divisible by 4 for two 2x downsamplings")
        if self.use_adapters and self.adapter_dim >= min(self.stage_dims):
            raise ConfigError(f"adapter dim {self.adapter_dim} must be below every stage dim {self.stage_dims}")
        bad = set(self.edge_directions) - set(DIRECTIONS)
        if bad:
            raise ConfigError(f"unknown edge directions {sorted(bad)}")
        if self.adapter_input not in ("block_input", "block_output"):
            raise ConfigError(f"adapter_input must be block_input or block_output, got {self.adapter_input!r}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder dim must be divisible by decoder heads")

    @property
    def decoder_dim(self) -> int:
        return self.stage_dims[-1]

    @property
    def grid_sizes(self) -> tuple[int, int, int]:
        g = self.image_size // self.patch_size
        return (g, g // 2, g // 4)


def _check_schedule(section) -> None:
    if section.epochs < 1 or section.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if not section.lr > 0:
        raise ConfigError(f"lr must be positive, got {section.lr}")
    if not 0 < section.lr_decay <= 1:
        raise ConfigError(f"lr_decay must lie in (0, 1], got {section.lr_decay}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 2e-3
    lr_decay: float = 0.98
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    jitter_max: int = 20
    rejitter: bool = True

    def __post_init__(self):
        _check_schedule(self)
        if self.jitter_max < 0:
            raise ConfigError("jitter_max must be non-negative")
        if self.focal_weight < 0 or self.dice_weight < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 2e-3
    lr_decay: float = 0.98
    levels: tuple[str, ...] = LEVELS
    stage_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    finetune_decoder: bool = False

    def __post_init__(self):
        _check_schedule(self)
        if not self.levels:
            raise ConfigError("at least one distillation level must be enabled")
        bad = set(self.levels) - set(LEVELS)
        if bad:
            raise ConfigError(f"unknown distillation levels {sorted(bad)}")
        if len(self.stage_weights) != 3:
            raise ConfigError("stage_weights needs three entries")


@dataclass(frozen=True)
class DataConfig:
    dir: str | None = None
    n_synthetic: int = 10
    blob_offset: float = 0.35


def _default_student() -> ModelConfig:
    return ModelConfig(stage_dims=(16, 32, 64), adapter_dim=8, edge_dim=8)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    student: ModelConfig = field(default_factory=_default_student)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.student.image_size != self.model.image_size or \
                self.student.patch_size != self.model.patch_size:
            raise ConfigError("student and teacher must share image and patch size")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


_SECTIONS = {"model": ModelConfig, "student": ModelConfig, "train": TrainConfig,
             "distill": DistillConfig, "data": DataConfig}


def _check_value(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected list, got {value!r}")
        if default:
            return tuple(_check_value(f"{name}[{i}]", v, default[0]) for i, v in enumerate(value))
        return tuple(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{name}: expected string, got {value!r}")
        return value
    raise ConfigError(f"{name}: unsupported value {value!r}")


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    base = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    values = {}
    for key, value in raw.items():
        default = getattr(base, key)
        if key == "student" and cls is RunConfig:
            continue
        if key in _SECTIONS and cls is RunConfig:
            values[key] = _build(_SECTIONS[key], value, f"{where}.{key}")
        else:
            values[key] = _check_value(f"{where}.{key}", value, default)
    if cls is RunConfig and "student" in raw:
        # student sections start from the student defaults, not the teacher's
        merged = dataclasses.asdict(_default_student())
        merged.update(raw["student"])
        values["student"] = _build(ModelConfig, _jsonable(merged), f"{where}.student")
    try:
        return dataclasses.replace(base, **values)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d))


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "config")


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def model_config_from_dict(raw: dict) -> ModelConfig:
    return _build(ModelConfig, _jsonable(raw), "model")
