"""
Pipeline configuration: one JSON file plus ``--set key=value`` overrides.

Example::

    {
        "scene": "scenes/room",
        "output_dir": "runs/room",
        "seed": 0,
        "field": {"L_pos": 10},
        "train": {"steps": 20000, "depth_weight": 0.1},
        "grid": {"resolution": 128},
        "mesh": {"atlas_size": 1024, "refine": {"iterations": 3}}
    }
"""

import os
import json
import logging
from dataclasses import asdict, dataclass, field as dataclass_field, fields, replace
from typing import Optional

from .mesher import RefineConfig
from .radiance_field import FieldConfig
from .trainer import TrainConfig
from .utils import ConfigError, InputError

mod_logger = logging.getLogger(__name__)


@dataclass
class GridConfig:
    resolution: int = 128
    sigma_o: Optional[float] = None
    view_weight: float = 0.1
    threshold: float = 0.05
    decay: float = 0.95
    padding: float = 0.05

    def validate(self):
        if self.resolution < 2:
            raise InputError("grid resolution must be >= 2, got {}".format(self.resolution))
        if self.sigma_o is not None and self.sigma_o <= 0:
            raise InputError("sigma_o must be > 0, got {}".format(self.sigma_o))
        if not 0.0 <= self.view_weight <= 0.5:
            raise InputError("view_weight must be in [0, 0.5], got {}".format(self.view_weight))
        if not 0.0 <= self.threshold <= 1.0:
            raise InputError("threshold must be in [0, 1], got {}".format(self.threshold))
        if not 0.0 < self.decay <= 1.0:
            raise InputError("decay must be in (0, 1], got {}".format(self.decay))
        return self


@dataclass
class MeshConfig:
    iso_density: Optional[float] = None
    atlas_size: int = 1024
    refine: RefineConfig = dataclass_field(default_factory=RefineConfig)

    def validate(self):
        if self.iso_density is not None and self.iso_density <= 0:
            raise InputError("iso_density must be > 0, got {}".format(self.iso_density))
        if self.atlas_size < 8:
            raise InputError("atlas_size must be >= 8, got {}".format(self.atlas_size))
        self.refine.validate()
        return self


@dataclass
class PipelineConfig:
    scene: Optional[str] = None
    output_dir: Optional[str] = None
    seed: int = 0
    field: FieldConfig = dataclass_field(default_factory=FieldConfig)
    train: TrainConfig = dataclass_field(default_factory=TrainConfig)
    grid: GridConfig = dataclass_field(default_factory=GridConfig)
    mesh: MeshConfig = dataclass_field(default_factory=MeshConfig)
    include_decorated: bool = False

    def validate(self, require_scene=True):
        try:
            self.field.validate()
            self.train.validate()
            self.grid.validate()
            self.mesh.validate()
        except InputError as exc:
            raise ConfigError(exc.raw_message)
        if require_scene:
            if not self.scene:
                raise ConfigError("No scene directory configured")
            if not os.path.isdir(self.scene):
                raise ConfigError("Scene directory {} does not exist".format(self.scene))
        return self

    def to_json(self):
        payload = asdict(self)
        payload["mesh"]["refine"].pop("views", None)
        if payload["train"]["seed"] == payload["seed"]:
            payload["train"].pop("seed")
        return payload

    def save(self, path):
        with open(path, "w") as fid:
            json.dump(self.to_json(), fid, indent=2, sort_keys=True)
        return path

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload or {})
        sections = {
            "field": FieldConfig,
            "train": TrainConfig,
            "grid": GridConfig,
        }
        kwargs = {}
        train = payload.get("train")
        for name, section_cls in sections.items():
            kwargs[name] = _build(section_cls, payload.pop(name, {}), name)
        mesh = dict(payload.pop("mesh", {}) or {})
        refine = _build(RefineConfig, mesh.pop("refine", {}), "mesh.refine")
        kwargs["mesh"] = replace(_build(MeshConfig, mesh, "mesh"), refine=refine)
        top = _build(cls, payload, "config")
        config = replace(top, **kwargs)
        # the root seed drives training unless train.seed was given
        if "seed" not in (train or {}):
            config.train = replace(config.train, seed=config.seed)
        return config

    @classmethod
    def from_json(cls, path=None, overrides=()):
        """Load ``path`` (optional) and apply dotted ``key=value`` overrides."""
        payload = {}
        if path is not None:
            if not os.path.isfile(path):
                raise ConfigError("Config file {} does not exist".format(path))
            with open(path) as fid:
                try:
                    payload = json.load(fid)
                except ValueError as exc:
                    raise ConfigError("Config file {} is not valid JSON: {}".format(path, exc))
            if not isinstance(payload, dict):
                raise ConfigError("Config file {} must hold a JSON object".format(path))
        for override in overrides:
            apply_override(payload, override)
        config = cls.from_dict(payload)
        mod_logger.debug("Resolved config: %s", config.to_json())
        return config


def _build(cls, payload, section):
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError("Config section {} must be an object".format(section))
    known = set(f.name for f in fields(cls))
    nested = set(("field", "train", "grid", "mesh", "refine"))
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError("Unknown keys in {}: {}".format(section, ", ".join(unknown)))
    try:
        return cls(**dict((k, v) for k, v in payload.items() if k not in nested))
    except TypeError as exc:
        raise ConfigError("Invalid {} section: {}".format(section, exc))


def parse_value(text):
    """JSON scalar when possible (numbers, true/false/null), else the raw string."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(payload, override):
    """Apply one ``a.b.c=value`` override to a nested dict in place."""
    if "=" not in override:
        raise ConfigError("Override {!r} must look like key=value".format(override))
    key, value = override.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError("Override {!r} has an empty key".format(override))
    target = payload
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError("Override {!r} descends into a non-object".format(override))
    target[parts[-1]] = parse_value(value)
    return payload
