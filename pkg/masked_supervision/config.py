"""Run configuration: one JSON document with a section per component.

Every leaf can be overridden on the command line as ``--section.key=value``;
values are parsed according to the field's declared type.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

from .data import DatasetConfig, default_small_threshold
from .errors import ConfigError
from .evaluation import EvalConfig
from .loss import LossWeights
from .model import Architecture
from .serializers import COMPRESSORS
from .sources import MaskGenParams
from .training import TrainConfig

DEFAULT_RUN_ROOT = os.environ.get("MSL_RUN_ROOT", "runs")


@dataclass
class MaskConfig:
    count: int = 1000
    height: int = 64
    width: int = 64
    seed: int = 0
    threshold: float = 0.5
    budget_factor: int = 100
    source_dir: Optional[str] = None
    invert: bool = False
    compression: str = "gzip"
    n_strokes: Tuple[int, int] = (1, 10)
    n_vertices: Tuple[int, int] = (4, 10)
    step_length: Tuple[int, int] = (4, 16)
    brush_width: Tuple[int, int] = (2, 8)
    n_holes: Tuple[int, int] = (0, 5)
    hole_radius: Tuple[int, int] = (3, 14)
    max_turn_degrees: float = 90.0
    soft_keep: float = 0.884

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"mask size must be at least 8x8, got {self.height}x{self.width}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.soft_keep < self.threshold:
            raise ValueError(
                f"soft_keep={self.soft_keep} is below threshold={self.threshold}: "
                "every pixel would be removed"
            )
        if self.budget_factor < 1:
            raise ValueError(f"budget_factor must be >= 1, got {self.budget_factor}")
        if self.compression not in COMPRESSORS:
            valid = ", ".join(COMPRESSORS.keys())
            raise ValueError(f"Invalid compression '{self.compression}'. Valid options: {valid}")
        for name in ("n_strokes", "n_vertices", "step_length", "brush_width", "n_holes", "hole_radius"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        # Validates the generator ranges as a side effect
        self.gen_params()

    def gen_params(self) -> MaskGenParams:
        return MaskGenParams(
            n_strokes=self.n_strokes,
            n_vertices=self.n_vertices,
            step_length=self.step_length,
            brush_width=self.brush_width,
            n_holes=self.n_holes,
            hole_radius=self.hole_radius,
            max_turn_degrees=self.max_turn_degrees,
            soft_keep=self.soft_keep,
        )


@dataclass
class ModelConfig:
    """Backbone shape; class count and input size come from the dataset."""

    widths: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    strides: Tuple[int, ...] = (2, 2, 2)
    padding: int = 1

    def __post_init__(self) -> None:
        self.widths = tuple(int(v) for v in self.widths)
        self.strides = tuple(int(v) for v in self.strides)

    def architecture(self, num_classes: int, input_size: Tuple[int, int]) -> Architecture:
        return Architecture(
            num_classes=num_classes,
            input_size=input_size,
            widths=self.widths,
            kernel_size=self.kernel_size,
            strides=self.strides,
            padding=self.padding,
        )


SECTIONS: Dict[str, type] = {
    "dataset": DatasetConfig,
    "masks": MaskConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _jsonable(value: Any) -> Any:
    if isinstance(value, LossWeights):
        return list(value.as_tuple())
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


def section_to_dict(section: Any) -> Dict[str, Any]:
    return {f.name: _jsonable(getattr(section, f.name)) for f in dataclasses.fields(section)}


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        try:
            self.architecture()
        except ValueError as e:
            raise ConfigError(f"invalid model config: {e}") from e

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: section_to_dict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        sections = {}
        for name, section_cls in SECTIONS.items():
            values = data.get(name, {})
            if not isinstance(values, Mapping):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(section_cls)}
            bad = sorted(set(values) - known)
            if bad:
                raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(bad)}")
            try:
                sections[name] = section_cls(**values)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name} config: {e}") from e
        return cls(**sections)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def architecture(self, num_classes: Optional[int] = None, input_size: Optional[Tuple[int, int]] = None) -> Architecture:
        return self.model.architecture(
            num_classes if num_classes is not None else self.dataset.num_classes,
            input_size if input_size is not None else (self.dataset.height, self.dataset.width),
        )

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        """Return a new config with ``section.key=value`` overrides applied and re-validated."""
        data = self.to_dict()
        # Let an auto-derived small_threshold follow a width override
        if self.dataset.small_threshold == default_small_threshold(self.dataset.width):
            data["dataset"]["small_threshold"] = None
        for item in overrides:
            key, value = parse_override(item)
            section, _, leaf = key.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r} in override {item!r}")
            hints = typing.get_type_hints(SECTIONS[section])
            if leaf not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
                raise ConfigError(f"unknown key {leaf!r} in section {section!r}")
            try:
                data[section][leaf] = coerce(value, hints[leaf])
            except ValueError as e:
                raise ConfigError(f"cannot parse {item!r}: {e}") from e
        return RunConfig.from_dict(data)


def parse_override(item: str) -> Tuple[str, str]:
    text = item[2:] if item.startswith("--") else item
    key, sep, value = text.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"overrides must look like --section.key=value, got {item!r}")
    return key, value


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def coerce(value: str, hint: Any) -> Any:
    """Parse a command-line string into the type named by ``hint``."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if type(None) in args and value.strip().lower() in ("none", "null", ""):
            return None
        return coerce(value, inner[0])
    if hint is bool:
        lowered = value.strip().lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if hint is LossWeights:
        return list(LossWeights.parse(value).as_tuple())
    if origin in (tuple, list):
        item_type = args[0] if args else str
        parts = [p.strip() for p in value.strip().strip("[]()").split(",") if p.strip()]
        return [coerce(p, item_type) for p in parts]
    if hint in (int, float, str):
        return hint(value)
    raise ValueError(f"unsupported field type {hint!r}")
