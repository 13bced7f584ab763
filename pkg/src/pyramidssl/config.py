"""Run configuration: dataclass sections, strict dict round-trip, presets.

Every tunable decision surfaces here as a named key with its default, so a
JSON config file plus flag overrides fully determines a run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


def _pair(a: float, b: float) -> tuple[float, float]:
    return (float(a), float(b))


@dataclass
class ModelSection:
    dimensionality: str = "3d"  # "2d" or "3d"
    in_channels: int = 1
    decoder_channels: int = 64
    encoder_width_multiplier: float = 1.0
    use_skip_connections: bool = False  # ablation mode; default is the non-skip pyramid


@dataclass
class CropSection:
    # 3D paired-crop sampling
    global_size_set: tuple = ((64, 64, 32), (96, 96, 64), (96, 96, 96), (112, 112, 64))
    local_size_set: tuple = ((8, 8, 8), (16, 16, 16), (32, 32, 16), (32, 32, 32))
    iou_min: float = 0.3
    max_attempts: int = 1000
    num_local_views: int = 6
    global_view_size_3d: tuple = (64, 64, 32)  # resize target for 3D global views
    local_view_size_3d: tuple = (16, 16, 16)   # resize target for 3D local views
    # 2D multi-crop sampling
    global_scale_range_2d: tuple = (0.3, 1.0)
    local_scale_range_2d: tuple = (0.05, 0.3)
    aspect_ratio_range_2d: tuple = (0.75, 4.0 / 3.0)
    output_size_2d: int = 224


@dataclass
class AugmentSection:
    apply_prob: float = 0.5
    rotation_max_deg: float = 10.0
    affine_scale_range: tuple = (0.9, 1.1)
    blur_sigma_range: tuple = (0.1, 2.0)
    noise_std_max: float = 0.1
    gamma_range: tuple = (0.7, 1.5)
    cutout_max_area_fraction: float = 0.25


@dataclass
class ObjectiveSection:
    crossed_comparison: bool = False  # compare all scale pairs instead of matching scales
    degenerate_norm_eps: float = 1e-12


@dataclass
class DataSection:
    hu_window: tuple = (-1000.0, 1000.0)
    air_threshold_hu: float = -150.0
    background_fraction: float = 0.85
    split_fractions: tuple = (0.7, 0.1, 0.2)
    labeling_ratio: float = 1.0


@dataclass
class TrainerSection:
    lr0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 4
    checkpoint_every: int = 10
    finetune_epochs: int = 60
    finetune_lr: float = 1e-2
    finetune_batch_size: int = 4
    finetune_input_size: tuple | None = None  # None: 224x224 for 2d, 48x48x24 for 3d
    num_classes: int = 3
    freeze_encoder: bool = False
    dice_smooth: float = 1e-5


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    crop: CropSection = field(default_factory=CropSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    data: DataSection = field(default_factory=DataSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)

    def to_dict(self) -> dict:
        return _asdict_jsonable(self)

    def validate(self) -> "RunConfig":
        if self.model.dimensionality not in ("2d", "3d"):
            raise ConfigError(
                f"model.dimensionality must be '2d' or '3d', got {self.model.dimensionality!r}"
            )
        if self.model.decoder_channels < 2:
            raise ConfigError("model.decoder_channels must be >= 2")
        if not (0.0 < self.data.labeling_ratio <= 1.0):
            raise ConfigError("data.labeling_ratio must be in (0, 1]")
        fr = self.data.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("data.split_fractions must be three non-negative values summing to 1")
        if not (0.0 <= self.crop.iou_min <= 1.0):
            raise ConfigError("crop.iou_min must be in [0, 1]")
        if self.crop.max_attempts < 1:
            raise ConfigError("crop.max_attempts must be >= 1")
        if self.trainer.batch_size < 1 or self.trainer.epochs < 0:
            raise ConfigError("trainer.batch_size must be >= 1 and trainer.epochs >= 0")
        lo, hi = self.data.hu_window
        if not hi > lo:
            raise ConfigError("data.hu_window must satisfy high > low")
        return self


_SECTION_TYPES = {
    "model": ModelSection,
    "crop": CropSection,
    "augment": AugmentSection,
    "objective": ObjectiveSection,
    "data": DataSection,
    "trainer": TrainerSection,
}


def _asdict_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _asdict_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict_jsonable(v) for v in obj]
    return obj


def _coerce(value: Any, like: Any) -> Any:
    # JSON has no tuples; convert nested lists back for tuple-typed defaults.
    if isinstance(like, tuple) and isinstance(value, (list, tuple)):
        return tuple(_coerce(v, like[0] if like else v) for v in value)
    if isinstance(value, (list, tuple)):
        return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    return value


def _section_from_dict(cls: type, payload: dict, path: str) -> Any:
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys under {path!r}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in payload.items():
        kwargs[name] = _coerce(value, getattr(defaults, name))
    return dataclasses.replace(defaults, **kwargs)


def from_dict(payload: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) nested dict; unknown keys raise."""
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(payload) - set(_SECTION_TYPES) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    if "seed" in payload:
        if not isinstance(payload["seed"], int) or isinstance(payload["seed"], bool):
            raise ConfigError("seed must be an integer")
        cfg = dataclasses.replace(cfg, seed=payload["seed"])
    for name, cls in _SECTION_TYPES.items():
        if name in payload:
            cfg = dataclasses.replace(cfg, **{name: _section_from_dict(cls, payload[name], name)})
    return cfg.validate()


def load_file(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return from_dict(payload)


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply `section.key=json_value` strings on top of a config."""
    payload = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # allow bare strings such as dimensionality=2d
        node = payload
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section in override: {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key in override: {dotted!r}")
        node[parts[-1]] = value
    return from_dict(payload)


def desk_preset() -> RunConfig:
    """Small defaults that train in minutes on a CPU."""
    return RunConfig()


def paper_scale_preset(dimensionality: str = "3d") -> RunConfig:
    """Full-scale schedule: long cosine run with large batches."""
    cfg = RunConfig()
    cfg = dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, dimensionality=dimensionality),
        trainer=dataclasses.replace(
            cfg.trainer,
            epochs=240,
            batch_size=32 if dimensionality == "3d" else 256,
        ),
    )
    return cfg.validate()


PRESETS = {
    "desk": desk_preset,
    "full-3d": lambda: paper_scale_preset("3d"),
    "full-2d": lambda: paper_scale_preset("2d"),
}
