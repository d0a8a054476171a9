"""Flat ``key = value`` run configuration covering model, data, loss and eval."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, replace

from .data import SynthSpec
from .losses import LossWeights
from .modules import BackboneConfig
from .training import TrainConfig


class ConfigParseError(ValueError):
    pass


# key -> (section, attribute); ``seed`` is special-cased to feed both data and training
_SECTIONS = {
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "synth": SynthSpec,
}
_PREFIX = {"synth": "synth_"}
# use_anm/use_local live on the training config; build_model copies them over
_SKIP = {("train", "weights"), ("train", "seed"), ("synth", "seed"),
         ("backbone", "use_anm"), ("backbone", "use_local")}


def _keys() -> dict[str, tuple[str, str]]:
    out: dict[str, tuple[str, str]] = {"seed": ("", "seed")}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIP:
                continue
            key = _PREFIX.get(section, "") + f.name
            if key in out:
                raise RuntimeError(f"duplicate config key {key}")
            out[key] = (section, f.name)
    out["metric"] = ("eval", "metric")
    out["camera_filter"] = ("eval", "camera_filter")
    return out


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    metric: str = "euclidean"
    camera_filter: bool = False

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def loss(self) -> LossWeights:
        return self.train.weights

    @classmethod
    def desk(cls) -> "Config":
        return cls(train=TrainConfig.desk())

    def get(self, key: str):
        section, attr = KEYS[key]
        if section == "":
            return self.seed
        if section == "eval":
            return getattr(self, attr)
        return getattr(self._section(section), attr)

    def _section(self, section: str):
        if section == "loss":
            return self.train.weights
        return getattr(self, section)

    def with_values(self, values: dict[str, object]) -> "Config":
        """Copy with typed ``values`` applied; validation runs once per section."""
        per: dict[str, dict] = {s: {} for s in _SECTIONS}
        top: dict[str, object] = {}
        for key, value in values.items():
            if key not in KEYS:
                raise ConfigParseError(f"unknown key {key!r}")
            section, attr = KEYS[key]
            if section == "":
                per["train"]["seed"] = value
                per["synth"]["seed"] = value
            elif section == "eval":
                top[attr] = value
            else:
                per[section][attr] = value
        weights = replace(self.train.weights, **per["loss"])
        return replace(
            self,
            backbone=replace(self.backbone, **per["backbone"]),
            train=replace(self.train, weights=weights, **per["train"]),
            synth=replace(self.synth, **per["synth"]),
            **top,
        )


KEYS = _keys()


def _field_types() -> dict[str, object]:
    base = Config()
    return {key: type(base.get(key)) for key in KEYS}


def parse_value(key: str, text: str, kind) -> object:
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            if text in ("", "()"):
                return ()
            # milestones and decay values mix ints and floats
            return tuple(_number(p) for p in text.split(","))
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigParseError(f"bad value for {key}: {text!r} (expected {kind.__name__})") from None


def _number(s: str):
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        return float(s)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse(text: str, base: Config | None = None) -> Config:
    types = _field_types()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigParseError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigParseError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, value, types[key])
        except ConfigParseError as exc:
            raise ConfigParseError(f"line {lineno}: {exc}") from None
    try:
        return (base or Config()).with_values(values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigParseError):
            raise
        raise ConfigParseError(str(exc)) from None


def load(path: str | os.PathLike, base: Config | None = None) -> Config:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse(text, base)
    except ConfigParseError as exc:
        raise ConfigParseError(f"{path}: {exc}") from None


def dump(cfg: Config) -> str:
    return "".join(f"{key} = {format_value(cfg.get(key))}\n" for key in KEYS)
