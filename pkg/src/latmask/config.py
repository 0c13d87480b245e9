"""Flat ``section.key = value`` run configuration.

Every key maps onto a field of one module config dataclass::

    # desk.cfg
    data.train_per_kind = 100
    separation.learning_rate = 5.0
    separation.fft_sizes = 1024 2048
    run.out_dir = runs/desk

Unknown sections or keys are rejected.  Sequence values are written
space-separated.  ``LATMASK_CONFIG`` names the config file used when none
is given on the command line.
"""
import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from latmask.data import DatasetConfig
from latmask.errors import ConfigError
from latmask.models.autoencoder import AutoencoderConfig
from latmask.models.tagger import TaggerConfig
from latmask.models.training import AutoencoderTrainConfig, TaggerTrainConfig
from latmask.separation import SeparationConfig

ENV_VAR = "LATMASK_CONFIG"


@dataclass
class PathsConfig:
    """Locations and evaluation-set shape shared by the subcommands."""
    out_dir: str = "runs"
    dataset_dir: str = ""  # defaults to <out_dir>/dataset
    models_dir: str = ""  # defaults to <out_dir>/models
    eval_dir: str = ""  # defaults to <out_dir>/eval_mixtures
    eval_mixtures: int = 20
    eval_duration: float = 4.0
    eval_seed: int = 5000
    seed: int = 0

    def resolve(self, name):
        value = getattr(self, name)
        default = {"dataset_dir": "dataset", "models_dir": "models", "eval_dir": "eval_mixtures"}[name]
        return Path(value) if value else Path(self.out_dir) / default


SECTIONS = {
    "data": DatasetConfig,
    "autoencoder": AutoencoderConfig,
    "autoencoder_train": AutoencoderTrainConfig,
    "tagger": TaggerConfig,
    "tagger_train": TaggerTrainConfig,
    "separation": SeparationConfig,
    "run": PathsConfig,
}


def _parse_value(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split())
        if isinstance(default, dict):
            return {k: int(v) for k, v in (item.split(":") for item in text.split())}
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    autoencoder_train: AutoencoderTrainConfig = field(default_factory=AutoencoderTrainConfig)
    tagger: TaggerConfig = field(default_factory=TaggerConfig)
    tagger_train: TaggerTrainConfig = field(default_factory=TaggerTrainConfig)
    separation: SeparationConfig = field(default_factory=SeparationConfig)
    run: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_pairs(cls, pairs):
        """Build from an iterable of ("section.key", "value") strings."""
        updates = {name: {} for name in SECTIONS}
        for key, raw in pairs:
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            defaults = {f.name: f for f in fields(SECTIONS[section])}
            if name not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            f = defaults[name]
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            updates[section][name] = _parse_value(raw, default, key)
        try:
            return cls(**{s: SECTIONS[s](**updates[s]) for s in SECTIONS})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def echo(self):
        """Fully resolved effective config as nested plain data."""
        out = {}
        for name in SECTIONS:
            obj = getattr(self, name)
            out[name] = obj.echo() if hasattr(obj, "echo") else json.loads(json.dumps(dataclasses.asdict(obj), default=list))
        return out

    def to_text(self):
        lines = []
        for section, values in self.echo().items():
            for key, value in values.items():
                if isinstance(value, (list, tuple)):
                    value = " ".join(str(v) for v in value)
                elif isinstance(value, dict):
                    value = " ".join(f"{k}:{v}" for k, v in value.items())
                lines.append(f"{section}.{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_text(text):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=()):
    """Read ``path`` (or $LATMASK_CONFIG, or defaults) and apply ("key", "value") overrides."""
    path = path or os.environ.get(ENV_VAR)
    pairs = []
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            pairs = parse_text(p.read_text(encoding="utf-8"))
        except UnicodeDecodeError:
            raise ConfigError(f"config file is not UTF-8: {p}") from None
    return RunConfig.from_pairs(list(pairs) + list(overrides))
