"""Layered experiment configuration: presets < config file < CLI overrides.

Unknown keys are rejected, and every command echoes the fully-resolved
configuration (with its seed) into the run directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .augment import AugmentConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .labeling import LLMEndpointConfig
from .networks import (
    DETECTION_PRESETS,
    DetectionNetConfig,
    HemorrhageSegConfig,
    ParcellationConfig,
)
from .preprocess import PreprocessConfig
from .training import LossConfig, OptimizerConfig


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def build_dataclass(cls, data: dict, where: str):
    """Construct a (frozen) config dataclass, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def apply_overrides(cfg, overrides: dict, where: str):
    if not overrides:
        return cfg
    known = {f.name for f in dataclasses.fields(cfg)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return dataclasses.replace(cfg, **{k: _tuplify(v) for k, v in overrides.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class TrainingSection:
    detect: OptimizerConfig = field(default_factory=OptimizerConfig)
    hemseg: OptimizerConfig = field(default_factory=OptimizerConfig)
    parcel: OptimizerConfig = field(default_factory=OptimizerConfig)
    fuse: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def for_task(self, task: str) -> OptimizerConfig:
        return {"detect": self.detect, "hemseg": self.hemseg,
                "parcel": self.parcel, "fuse": self.fuse}[task]


@dataclass
class PhantomSection:
    grid_shape: tuple[int, int, int] = (32, 160, 160)
    spacing: tuple[float, float, float] = (4.0, 1.0, 1.0)
    brain_semiaxes: tuple[float, float, float] = (40.0, 50.0, 40.0)
    prevalence: dict = field(default_factory=lambda: {
        "hemorrhage": 0.3, "pneumocephalus": 0.2, "midline_shift": 0.2,
        "skull_fracture": 0.15, "diffuse_cerebral_edema": 0.15,
        "arterial_hyperdensity": 0.1,
    })
    volume_format: str = "nii"


@dataclass
class EvaluationSection:
    subset: str = "all16"
    ci_replicates: int = 2000
    batch_size: int = 8


@dataclass
class NetworksSection:
    detection_preset: str = "deepcntd"
    detection_overrides: dict = field(default_factory=dict)
    hemorrhage: HemorrhageSegConfig = field(default_factory=HemorrhageSegConfig)
    parcellation: ParcellationConfig = field(default_factory=ParcellationConfig)

    def detection(self) -> DetectionNetConfig:
        if self.detection_preset not in DETECTION_PRESETS:
            raise ConfigError(
                f"networks.detection_preset: unknown preset {self.detection_preset!r}; "
                f"available: {sorted(DETECTION_PRESETS)}")
        cfg = DETECTION_PRESETS[self.detection_preset]
        return apply_overrides(cfg, self.detection_overrides,
                               "networks.detection_overrides")


@dataclass
class ExperimentConfig:
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    labeling: LLMEndpointConfig = field(default_factory=LLMEndpointConfig)
    networks: NetworksSection = field(default_factory=NetworksSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"config: unknown sections {sorted(unknown)}")

        sections = {}
        if "seed" in data:
            sections["seed"] = int(data["seed"])
        if "paths" in data:
            sections["paths"] = dict(data["paths"])
        simple = {
            "preprocess": PreprocessConfig,
            "augment": AugmentConfig,
            "labeling": LLMEndpointConfig,
            "fusion": FusionConfig,
            "evaluation": EvaluationSection,
            "phantom": PhantomSection,
        }
        for name, section_cls in simple.items():
            if name in data:
                sections[name] = build_dataclass(section_cls, data[name], name)
        if "networks" in data:
            net = dict(data["networks"] or {})
            unknown = set(net) - {"detection_preset", "detection_overrides",
                                  "hemorrhage", "parcellation"}
            if unknown:
                raise ConfigError(f"networks: unknown keys {sorted(unknown)}")
            sections["networks"] = NetworksSection(
                detection_preset=net.get("detection_preset", "deepcntd"),
                detection_overrides=dict(net.get("detection_overrides", {})),
                hemorrhage=build_dataclass(HemorrhageSegConfig,
                                           net.get("hemorrhage", {}), "networks.hemorrhage"),
                parcellation=build_dataclass(ParcellationConfig,
                                             net.get("parcellation", {}),
                                             "networks.parcellation"),
            )
        if "training" in data:
            tr = dict(data["training"] or {})
            unknown = set(tr) - {"detect", "hemseg", "parcel", "fuse", "loss"}
            if unknown:
                raise ConfigError(f"training: unknown keys {sorted(unknown)}")
            sections["training"] = TrainingSection(
                detect=build_dataclass(OptimizerConfig, tr.get("detect", {}), "training.detect"),
                hemseg=build_dataclass(OptimizerConfig, tr.get("hemseg", {}), "training.hemseg"),
                parcel=build_dataclass(OptimizerConfig, tr.get("parcel", {}), "training.parcel"),
                fuse=build_dataclass(OptimizerConfig, tr.get("fuse", {}), "training.fuse"),
                loss=build_dataclass(LossConfig, tr.get("loss", {}), "training.loss"),
            )
        return cls(**sections)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["networks"]["detection_resolved"] = dataclasses.asdict(self.networks.detection())
        return out

    def echo(self, out_dir) -> None:
        """Write the fully resolved configuration next to the run outputs."""
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved.yaml").write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=True))
