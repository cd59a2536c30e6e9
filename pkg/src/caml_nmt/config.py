"""Layered run configuration: flat ``section.key: value`` YAML files with
includes, ``CAML_SECTION__KEY`` environment overrides and command-line
overrides.  Precedence is env < file < flag; unknown keys are errors."""

from __future__ import annotations

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .equiv_gen import GenConfig
from .model import ModelConfig
from .synth import SynthSpec
from .trainer import TrainConfig

ENV_PREFIX = "CAML_"


class ConfigError(ValueError):
    """Configuration problems; ``errors`` lists every one found."""

    def __init__(self, errors):
        self.errors = list(errors) if isinstance(errors, (list, tuple)) else [errors]
        super().__init__("\n".join(self.errors))


@dataclass
class DataSettings:
    dir: str = "data"
    equiv_source: str = "oracle"
    eval_variants: int = 3
    pipeline: bool = True
    rt_epochs: int = 20

    def validate(self):
        errors = []
        if self.equiv_source not in ("oracle", "pipeline"):
            errors.append("data.equiv_source must be 'oracle' or 'pipeline'")
        if self.eval_variants < 1:
            errors.append("data.eval_variants must be >= 1")
        if self.rt_epochs < 0:
            errors.append("data.rt_epochs must be non-negative")
        if self.equiv_source == "pipeline" and not self.pipeline:
            errors.append("data.equiv_source = pipeline needs data.pipeline = true")
        return errors


@dataclass
class EvalSettings:
    beam: int = 0
    length_penalty: float = 0.6
    proportions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    bin_edges: list = field(default_factory=lambda: [0, 20, 40, 60, 80, 100])
    analyses: list = field(default_factory=lambda: ["bleu", "consistency", "degradation", "histogram"])
    every: int = 1

    def validate(self):
        errors = []
        if self.beam < 0:
            errors.append("eval.beam must be >= 0 (0 selects greedy decoding)")
        if any(not 0.0 <= p <= 1.0 for p in self.proportions):
            errors.append("eval.proportions must lie in [0, 1]")
        if any(b <= a for a, b in zip(self.bin_edges, self.bin_edges[1:])) or len(self.bin_edges) < 2:
            errors.append("eval.bin_edges must be strictly increasing")
        unknown = sorted(set(self.analyses) - set(ANALYSES))
        if unknown:
            errors.append(f"eval.analyses has unknown entries {unknown}; expected a subset of {list(ANALYSES)}")
        if self.every < 1:
            errors.append("eval.every must be >= 1")
        return errors


@dataclass
class AblateSettings:
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    arms: list = field(default_factory=lambda: list(ARMS))
    workers: int = 1

    def validate(self):
        errors = []
        if not self.seeds:
            errors.append("ablate.seeds must not be empty")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            errors.append(f"ablate.arms has unknown arms {unknown}")
        if self.workers < 1:
            errors.append("ablate.workers must be >= 1")
        return errors


ANALYSES = ("bleu", "consistency", "degradation", "histogram")

ARMS = {
    "baseline": {"train.mode": "baseline"},
    "augment": {"train.mode": "baseline", "train.augment": True},
    "maml": {"train.mode": "maml"},
    "mtl": {"train.mode": "mtl"},
    "caml": {"train.mode": "caml"},
    "caml+L_T": {"train.mode": "caml", "train.meta_translation": True},
    "caml-L_S": {"train.mode": "caml", "train.use_ls": False},
    "caml-L_W": {"train.mode": "caml", "train.use_lw": False},
}

SECTIONS = {
    "synth": SynthSpec,
    "gen": GenConfig,
    "data": DataSettings,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalSettings,
    "ablate": AblateSettings,
}


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(key, value, hint):
    """Check ``value`` against a dataclass field annotation; returns the typed value."""
    args = typing.get_args(hint)
    if type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is list or typing.get_origin(hint) is list:
        if isinstance(value, (list, tuple)):
            return list(value)
    elif hint is dict:
        if isinstance(value, dict):
            return value
    raise ConfigError(f"{key}: expected {getattr(hint, '__name__', hint)}, got {value!r}")


def flatten(tree, prefix=""):
    """``{"train": {"mode": "x"}}`` and ``{"train.mode": "x"}`` both give the flat form."""
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name in SECTIONS:
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def read_layer(path, _stack=()):
    """Flat key/value mapping from a YAML file, with ``include`` resolved first."""
    path = Path(path)
    if path.resolve() in _stack:
        raise ConfigError(f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = tree.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged = {}
    for inc in includes:
        merged.update(read_layer(path.parent / inc, _stack + (path.resolve(),)))
    merged.update(flatten(tree))
    return merged


def env_layer(environ=None):
    environ = os.environ if environ is None else environ
    flat = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        flat[key] = parse_value(raw)
    return flat


def parse_value(raw):
    """Scalar or list from its YAML spelling (``3``, ``true``, ``[1, 2]``, ``caml``)."""
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def parse_assignments(items):
    flat = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        flat[key.strip()] = parse_value(raw)
    return flat


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    gen: GenConfig = field(default_factory=GenConfig)
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablate: AblateSettings = field(default_factory=AblateSettings)

    def flat(self):
        out = {}
        for section in SECTIONS:
            for key, value in asdict(getattr(self, section)).items():
                out[f"{section}.{key}"] = value
        return out

    def to_json(self):
        return json.dumps(self.flat(), sort_keys=True, indent=1)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.flat(), sort_keys=True), encoding="utf-8")

    def validate(self):
        errors = []
        for section in SECTIONS:
            errors.extend(getattr(self, section).validate())
        return errors

    def with_overrides(self, flat):
        return build_config([self.flat(), flat])


def build_config(layers):
    """Apply flat layers in order over the defaults; every problem is collected."""
    merged = {}
    for layer in layers:
        merged.update(layer)
    errors = []
    values = {s: {} for s in SECTIONS}
    for key, value in merged.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            errors.append(f"unknown config key {key!r}")
            continue
        hints = _hints(SECTIONS[section])
        if name not in {f.name for f in fields(SECTIONS[section])}:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            values[section][name] = _coerce(key, value, hints[name])
        except ConfigError as exc:
            errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**{s: SECTIONS[s](**values[s]) for s in SECTIONS})
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, flags=None, environ=None):
    """Resolved configuration: defaults, then env, then file, then ``flags``."""
    layers = [env_layer(environ)]
    if path is not None:
        layers.append(read_layer(path))
    layers.append(dict(flags or {}))
    return build_config(layers)
