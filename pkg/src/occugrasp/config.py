"""Pipeline configuration: one YAML file, flag overrides, strict keys.

Precedence is flag > file > default. Unknown keys are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class PathsConfig:
    input_dir: str = "dataset"
    output_dir: str = "out"
    checkpoint_dir: str = "checkpoints"


@dataclass
class CameraConfig:
    stride: int = 4
    depth_variance: float = 0.001
    rotate_camera_covariance: bool = False


@dataclass
class FieldConfig:
    regularization: float = 1e-6
    fusion_neighbors: int = 8
    outlier_std_ratio: float = 0.01
    outlier_neighbors: int = 20


@dataclass
class SvgpConfig:
    inducing: int = 500
    lr: float = 1e-3
    epochs: int = 100
    batch: int | None = None


@dataclass
class CubatureConfig:
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 2.0
    paper_verbatim_weights: bool = False


@dataclass
class GraspConfig:
    nu: float = 5.0
    scorer: str = "stub"            # "stub" or "file"
    candidate_path: str | None = None
    gripper_width_max: float = 0.08
    contact_mode: str = "nearest"   # "nearest" or "region"
    max_pairs: int = 2000
    top_k: int = 10


@dataclass
class SceneConfig:
    shape: dict = field(default_factory=lambda: {"type": "kettlebell"})
    orbit_radius: float = 1.0
    elevation: list = field(default_factory=lambda: [0.3, 0.3])
    azimuth: list = field(default_factory=lambda: [0.0, 6.283185307179586])
    frame_count: int = 12
    depth_noise_var: float = 0.001
    pose_noise_std: float = 0.0     # isotropic translation noise, meters
    dropout: float = 0.0
    image_size: int = 64
    focal: float = 60.0


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    field_: FieldConfig = field(default_factory=FieldConfig)
    svgp: SvgpConfig = field(default_factory=SvgpConfig)
    cubature: CubatureConfig = field(default_factory=CubatureConfig)
    grasp: GraspConfig = field(default_factory=GraspConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        doc = {}
        for f in fields(self):
            val = getattr(self, f.name)
            doc[_section_name(f.name)] = asdict(val) if hasattr(val, "__dataclass_fields__") else val
        return doc


_SECTION_ALIASES = {"field_": "field"}


def _section_name(attr: str) -> str:
    return _SECTION_ALIASES.get(attr, attr)


def _attr_name(section: str) -> str:
    return "field_" if section == "field" else section


def _fill_section(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return cls(**doc)


def config_from_dict(doc: dict) -> PipelineConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    section_types = {_section_name(f.name): (f.name, f.type) for f in fields(PipelineConfig)}
    kwargs: dict[str, Any] = {}
    for key, val in doc.items():
        if key == "seed":
            kwargs["seed"] = int(val)
            continue
        if key not in section_types:
            raise ConfigError(f"unknown config section {key!r}")
        attr, _ = section_types[key]
        cls = type(getattr(PipelineConfig(), attr))
        kwargs[attr] = _fill_section(cls, val, key)
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        doc = yaml.safe_load(f)
    return config_from_dict(doc)


def dump_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def apply_override(config: PipelineConfig, assignment: str) -> None:
    """Apply one 'section.key=value' override in place; values parse as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    parts = key.strip().split(".")
    if len(parts) == 1 and parts[0] == "seed":
        config.seed = int(value)
        return
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be 'section.key' or 'seed'")
    section, name = parts
    attr = _attr_name(section)
    if not hasattr(config, attr):
        raise ConfigError(f"unknown config section {section!r}")
    target = getattr(config, attr)
    if name not in {f.name for f in fields(target)}:
        raise ConfigError(f"unknown key {name!r} in section {section!r}")
    setattr(target, name, value)
