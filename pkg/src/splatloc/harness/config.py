"""Pipeline configuration from an INI-style key/value file plus overrides.

Example file::

    [world]
    n_gaussians = 500
    feature_dim = 16
    scale_range = 0.01, 0.025

    [train]
    iterations = 3000

    [ransac]
    threshold = 3.0

    [refine]
    iterations = 250

Sections map onto :class:`PipelineConfig` attributes and keys onto the
fields of the corresponding dataclass. Overrides use ``section.key=value``.
Tuples are comma separated and ``none`` clears optional values.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from ..coarse_pose import RansacConfig
from ..descriptors import DEFAULT_NUM_KEYPOINTS
from ..distill import TrainConfig
from ..errors import InvalidInputError
from ..refinement import LocalizeConfig, RefineConfig
from .synthetic import WorldConfig


@dataclass
class SceneSetup:
    n_gaussians: int = 500
    n_views: int = 20
    n_queries: int = 20
    feature_dim: int = 16


@dataclass
class ProviderSetup:
    noise: float = 0.01
    stride: int = 1
    num_keypoints: int = DEFAULT_NUM_KEYPOINTS


@dataclass
class PipelineConfig:
    scene: SceneSetup = field(default_factory=SceneSetup)
    world: WorldConfig = field(default_factory=WorldConfig)
    provider: ProviderSetup = field(default_factory=ProviderSetup)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=3000))
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    feature_ransac: RansacConfig = field(default_factory=lambda: RefineConfig().feature_ransac)

    def localize_config(self) -> LocalizeConfig:
        refine = dataclasses.replace(self.refine, feature_ransac=self.feature_ransac)
        return LocalizeConfig(self.ransac, refine, self.provider.num_keypoints)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every stochastic stage seeded from ``seed``."""
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=seed),
            ransac=dataclasses.replace(self.ransac, seed=seed),
            refine=dataclasses.replace(self.refine, seed=seed),
            feature_ransac=dataclasses.replace(self.feature_ransac, seed=seed),
        )


def _convert(text: str, annotation: str, current):
    text = text.strip()
    ann = str(annotation)
    if text.lower() == "none" and ("None" in ann or current is None):
        return None
    if ann.startswith("tuple") or isinstance(current, tuple):
        return tuple(float(x) for x in text.split(","))
    if "bool" in ann:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if "int" in ann:
        return int(text)
    if "float" in ann:
        return float(text)
    return text


def set_value(config: PipelineConfig, section: str, key: str, value: str) -> PipelineConfig:
    """Return a copy of ``config`` with ``section.key`` parsed from ``value``."""
    sections = {f.name for f in dataclasses.fields(config)}
    if section not in sections:
        raise InvalidInputError(f"unknown config section {section!r}; expected one of {sorted(sections)}")
    sub = getattr(config, section)
    fields = {f.name: f for f in dataclasses.fields(sub)}
    if key not in fields or dataclasses.is_dataclass(getattr(sub, key)):
        raise InvalidInputError(f"unknown key {key!r} in section [{section}]")
    try:
        parsed = _convert(value, fields[key].type, getattr(sub, key))
        new_sub = dataclasses.replace(sub, **{key: parsed})
    except (ValueError, TypeError) as exc:
        raise InvalidInputError(f"bad value for {section}.{key}: {exc}") from None
    return dataclasses.replace(config, **{section: new_sub})


def parse_override(config: PipelineConfig, item: str) -> PipelineConfig:
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise InvalidInputError(f"override must look like section.key=value, got {item!r}")
    lhs, value = item.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return set_value(config, section, key, value)


def load_config(path=None, overrides=()) -> PipelineConfig:
    config = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise InvalidInputError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                config = set_value(config, section, key, value)
    for item in overrides:
        config = parse_override(config, item)
    return config


def dump_config(config: PipelineConfig, path) -> None:
    parser = configparser.ConfigParser()
    for f in dataclasses.fields(config):
        sub = getattr(config, f.name)
        parser[f.name] = {}
        for g in dataclasses.fields(sub):
            v = getattr(sub, g.name)
            if dataclasses.is_dataclass(v):
                continue
            parser[f.name][g.name] = ", ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
    with open(path, "w") as fh:
        parser.write(fh)
