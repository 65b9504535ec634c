"""Run configuration: one JSON document plus dotted-path flag overrides.

The resolved config (all defaults filled) is written alongside every run's
outputs so any run can be reproduced from that single artifact.
"""

from __future__ import annotations

import dataclasses
import json

from .data import GeneratorConfig
from .detector import DetectorConfig
from .train import MODES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class EvalConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.5


@dataclasses.dataclass
class RunConfig:
    mode: str = "lgd"
    seed: int = 0
    gen: GeneratorConfig = dataclasses.field(default_factory=GeneratorConfig)
    detector: DetectorConfig = dataclasses.field(default_factory=DetectorConfig)
    trainer: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def resolve(self):
        """Fill derived fields and validate; returns self."""
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        # the detector's class count always follows the dataset
        self.detector.num_classes = self.gen.num_classes
        if self.gen.image_size % max(self.detector.strides):
            raise ConfigError(
                f"image_size {self.gen.image_size} must be divisible by "
                f"stride {max(self.detector.strides)}")
        if self.detector.channels % self.trainer.attn_heads:
            raise ConfigError(
                f"attn_heads {self.trainer.attn_heads} must divide "
                f"channels {self.detector.channels}")
        self.trainer.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_SECTIONS = {
    "gen": GeneratorConfig,
    "detector": DetectorConfig,
    "trainer": TrainConfig,
    "eval": EvalConfig,
}


def _build_section(cls, values):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    coerced = {}
    for key, val in values.items():
        if isinstance(val, list) and isinstance(fields[key].default, tuple):
            val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        coerced[key] = val
    return cls(**coerced)


def config_from_dict(doc):
    doc = dict(doc)
    cfg = RunConfig()
    for name, cls in _SECTIONS.items():
        if name in doc:
            section = doc.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            setattr(cfg, name, _build_section(cls, section))
    for key in ("mode", "seed"):
        if key in doc:
            setattr(cfg, key, doc.pop(key))
    if doc:
        raise ConfigError(f"unknown config keys: {sorted(doc)}")
    return cfg


def load_config(path=None, overrides=()):
    """Build a RunConfig from an optional JSON file and dotted overrides.

    Overrides are (path, raw_value) pairs like ("trainer.total_iters", "500");
    values parse as JSON with plain-string fallback, and flags win over file
    contents.
    """
    doc = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    for dotted, raw in overrides:
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {part} is not a section")
        node[parts[-1]] = value
    return config_from_dict(doc).resolve()


def write_resolved(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
