"""Run configuration: a JSON document with model, training and data sections."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backbone import BackboneConfig
from .data import SyntheticSpec
from .groups import AttributeCatalog, GroupAssignment, contiguous_assignment, load_assignment_csv, load_default_assignment
from .model import ModelConfig

BACKBONE_PRESETS = {
    "synthetic": BackboneConfig.synthetic,
    "desk": BackboneConfig.desk,
    "tiny": BackboneConfig.tiny,
    "reference": BackboneConfig.reference,
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    mode: str = "plain"
    batch_size: int = 32
    schedule: list[tuple[int, float]] = field(default_factory=lambda: [(10, 0.01), (5, 0.001)])
    momentum: float = 0.9
    seed: int = 0
    augment: bool = True
    flip_p: float = 0.5
    threshold: float = 0.5

    def __post_init__(self) -> None:
        self.schedule = [(int(e), float(lr)) for e, lr in self.schedule]
        if self.mode not in ("plain", "balanced"):
            raise ConfigError(f"training.mode must be 'plain' or 'balanced', got {self.mode!r}")
        if not self.schedule:
            raise ConfigError("training.schedule must be nonempty")
        if any(e < 0 or lr <= 0 for e, lr in self.schedule):
            raise ConfigError("schedule entries need epochs >= 0 and lr > 0")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")

    @property
    def epochs(self) -> int:
        return sum(e for e, _ in self.schedule)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        for e, lr in self.schedule:
            if epoch < e:
                return lr
            epoch -= e
        return self.schedule[-1][1]


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    generate: Optional[dict] = None  # {"spec": "default" | {...}, "count": int, "dir": optional path}
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self) -> None:
        if (self.manifest is None) == (self.generate is None):
            raise ConfigError("data needs exactly one of 'manifest' or 'generate'")
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("data.split must be three nonnegative fractions summing to 1")
        if self.generate is not None and int(self.generate.get("count", 0)) < 1:
            raise ConfigError("data.generate.count must be >= 1")

    def synthetic_spec(self) -> Optional[SyntheticSpec]:
        if self.generate is not None:
            return spec_from_value(self.generate.get("spec", "default"))
        side = Path(self.manifest).parent / "spec.json"
        if side.is_file():
            return SyntheticSpec.from_dict(json.loads(side.read_text()))
        return None


def spec_from_value(value: Any) -> SyntheticSpec:
    if value == "default" or value is None:
        return SyntheticSpec.default()
    if isinstance(value, dict):
        return SyntheticSpec.from_dict(value)
    if isinstance(value, str) and os.path.isfile(value):
        return SyntheticSpec.from_dict(json.loads(Path(value).read_text()))
    raise ConfigError(f"cannot interpret synthetic spec {value!r}")


@dataclass
class RunConfig:
    model: ModelConfig
    training: TrainingConfig
    data: DataConfig
    output_dir: str = "runs/default"
    figures: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            data = DataConfig(**d.get("data", {}))
            training = TrainingConfig(**d.get("training", {}))
            model = model_config_from_dict(d.get("model", {}), data)
            return cls(model, training, data, d.get("output_dir", "runs/default"), bool(d.get("figures", True)), d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: os.PathLike) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)


def resolve_assignment(value: Any, data: Optional[DataConfig]) -> GroupAssignment:
    if value == "default":
        return load_default_assignment()
    if value == "synthetic":
        spec = data.synthetic_spec() if data is not None else None
        return (spec or SyntheticSpec.default()).assignment()
    if isinstance(value, dict) and "sizes" in value:
        return contiguous_assignment(value["sizes"], value.get("names"))
    if isinstance(value, dict) and "groups" in value:
        names = value.get("attribute_names")
        groups = [(g, attrs) for g, attrs in value["groups"]]
        n = sum(len(a) for _, a in groups)
        catalog = AttributeCatalog(tuple(names)) if names else AttributeCatalog.generic(n)
        return GroupAssignment.from_groups(groups, catalog)
    if isinstance(value, str):
        if not os.path.isfile(value):
            raise ConfigError(f"group assignment file {value!r} not found")
        return load_assignment_csv(value)
    raise ConfigError(f"cannot interpret group assignment {value!r}")


def model_config_from_dict(d: dict, data: Optional[DataConfig] = None) -> ModelConfig:
    bb = d.get("backbone", "synthetic")
    if isinstance(bb, str):
        if bb not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown backbone preset {bb!r}")
        backbone = BACKBONE_PRESETS[bb]()
    else:
        backbone = BackboneConfig.from_dict(bb)
    if "tap_blocks" in d:
        backbone = BackboneConfig(backbone.input_shape, backbone.blocks, tuple(d["tap_blocks"]))
    assignment = resolve_assignment(d.get("groups", "synthetic"), data)
    if "N" in d and int(d["N"]) != assignment.N:
        raise ConfigError(f"model.N = {d['N']} but the group assignment covers {assignment.N} attributes")
    if "K" in d and int(d["K"]) != assignment.K:
        raise ConfigError(f"model.K = {d['K']} but the group assignment has {assignment.K} groups")
    return ModelConfig(backbone, assignment, float(d.get("alpha", 0.5)), d.get("variant", "full"))


def model_config_to_dict(cfg: ModelConfig) -> dict:
    """Self-contained form (explicit groups and names) stored with checkpoints."""
    return {
        "backbone": cfg.backbone.to_dict(),
        "groups": {
            "groups": [[name, list(attrs)] for name, attrs in cfg.assignment.groups],
            "attribute_names": list(cfg.assignment.catalog.names),
        },
        "alpha": cfg.alpha,
        "variant": cfg.variant,
    }
