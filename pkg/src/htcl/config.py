"""Experiment configuration and its flat text format.

File format, one setting per line::

    # comment
    section.key = <JSON literal>

Sections nest with dots (``data.spec.seed = 3``).  Values are JSON
literals: numbers, ``true``/``false``, ``null``, quoted strings, and lists
(read back as tuples).  Unknown keys are errors.  Any key can be overridden
from the environment as ``HTCL_<SECTION>_<KEY>`` with dots turned into
underscores and everything upper-cased, e.g. ``HTCL_STAGE1_T1=3``.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field

from htcl.baselines import BaselineConfig
from htcl.data import SyntheticSpec
from htcl.errors import ConfigError, ContractError
from htcl.hetero import Stage1Config
from htcl.invariant import Stage2Config

HEADER = "# htcl experiment config, format 1"

# Correlation-shift benchmark: 25% label noise, a strong color cue, and a
# mild per-environment style offset so environments remain identifiable.
SPURIOUS_DEFAULT = SyntheticSpec(n_per_class_per_env=500, label_noise=0.25, color_scale=3.0,
                                 class_center_scale=1.0, env_center_scale=1.0)


@dataclass(frozen=True)
class DataConfig:
    # "toy", "spurious", or "file"
    kind: str = "spurious"
    path: str | None = None
    # held-out domain id; None keeps every domain for training
    target_domain: int | None = None
    spec: SyntheticSpec = field(default_factory=lambda: SPURIOUS_DEFAULT)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    num_runs: int = 3
    val_fraction: float = 0.2
    out_dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self):
        run = self.experiment
        if not 0 < run.val_fraction < 1:
            raise ConfigError("experiment.val_fraction must lie in (0, 1)")
        if run.num_runs < 1:
            raise ConfigError("experiment.num_runs must be >= 1")
        if self.data.kind not in ("toy", "spurious", "file"):
            raise ConfigError(f"unknown data.kind {self.data.kind!r}")
        if self.data.kind == "file" and not self.data.path:
            raise ConfigError("data.kind = file needs data.path")
        try:
            self.stage1.validate()
            self.stage2.validate()
            self.baseline.validate()
            self.data.spec.validate(spurious=self.data.kind == "spurious")
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"stage1.T1": 3})``."""
        flat = flatten(self)
        for key, value in dotted.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = value
        return unflatten(flat)


def flatten(obj, prefix="") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _coerce(value, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(_coerce(v, args[0], key) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint!r}")


def _build(cls, flat: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, flat, key + ".")
        elif key in flat:
            kwargs[f.name] = _coerce(flat[key], hint, key)
    return cls(**kwargs)


def unflatten(flat: dict) -> ExperimentConfig:
    known = flatten(ExperimentConfig())
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return _build(ExperimentConfig, flat, "")


def _literal(value) -> str:
    if isinstance(value, tuple):
        value = list(value)
    if isinstance(value, float):
        return repr(value)
    return json.dumps(value)


def serialize(config: ExperimentConfig) -> str:
    lines = [HEADER]
    lines += [f"{key} = {_literal(value)}" for key, value in flatten(config).items()]
    return "\n".join(lines) + "\n"


def parse(text: str) -> ExperimentConfig:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        try:
            flat[key] = json.loads(value.strip())
        except json.JSONDecodeError:
            raise ConfigError(f"line {lineno}: value for {key!r} is not a JSON literal") from None
    defaults = flatten(ExperimentConfig())
    unknown = sorted(set(flat) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return unflatten({**defaults, **flat})


def env_key(key: str) -> str:
    return "HTCL_" + key.replace(".", "_").upper()


def apply_env(config: ExperimentConfig, environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    overrides = {}
    for key in flatten(config):
        name = env_key(key)
        if name in environ:
            raw = environ[name]
            try:
                overrides[key] = json.loads(raw)
            except json.JSONDecodeError:
                overrides[key] = raw
    return config.replace(**overrides) if overrides else config


def load_config(path=None, environ=None) -> ExperimentConfig:
    if path is None:
        config = ExperimentConfig()
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                config = parse(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return apply_env(config, environ).validate()


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(config))
