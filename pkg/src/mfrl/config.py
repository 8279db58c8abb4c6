"""Experiment configuration: nested dataclasses loaded from ``key = value`` text.

Keys are dotted ``section.field`` paths (``repr.epochs = 100``), ``#`` starts a comment, tuples are
comma-separated. Unknown keys and unparsable values raise ``ConfigError``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .logreg import DEFAULT_LAMBDA_GRID, DEFAULT_TEMPERATURE_GRID


class ConfigError(ValueError):
    pass


KINDS = ("sine-regression", "synthetic-classification", "feature-file-classification")


@dataclass
class ExperimentSection:
    kind: str = "sine-regression"
    seed: int = 0
    out_dir: str = "out"


@dataclass
class DataSection:
    # sine
    tasks_per_split: int = 500
    samples: int = 200
    shot: int = 10
    # synthetic classes
    classes: int = 64
    dim: int = 32
    per_class: int = 100
    std: float = 2.5
    latent_dim: int = 10
    mean_scale: float = 3.0
    data_seed: int = 0
    # feature file
    path: str = ""


@dataclass
class BackboneSection:
    hidden: tuple[int, ...] = (40, 40)
    activation: str = "erf"


@dataclass
class ReprSection:
    epochs: int = 60
    iterations: int = 0
    epoch_iters: int = 0
    batch_size: int = 64
    base_lr: float = 0.05
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    swa_epochs: int = 20
    swa_lr: float = 0.02


@dataclass
class HeadSection:
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    temperature_grid: tuple[float, ...] = DEFAULT_TEMPERATURE_GRID
    penalize_bias: bool = True
    bins: int = 15
    prior_a: float = 1e-6
    prior_b: float = 1e-6
    prior_c: float = 1e-6
    prior_d: float = 1e-6
    mcmc_chains: int = 2
    mcmc_warmup: int = 20000
    mcmc_samples: int = 4000
    mcmc_thin: int = 5
    mcmc_max_features: int = 8
    mcmc_episodes: int = 0


@dataclass
class ProtocolSection:
    way: int = 5
    shot: int = 5
    query: int = 15
    runs: int = 5
    episodes: int = 600
    val_episodes: int = 100


@dataclass
class SweepSection:
    swa_lr: tuple[float, ...] = (0.01, 0.05, 0.1)
    swa_epochs: tuple[int, ...] = (5, 10, 20)


@dataclass
class AveragingSection:
    ema: tuple[float, ...] = (0.9, 0.99, 0.999)
    ema_cadence: str = "epoch"  # or "step"


@dataclass
class SpectrumSection:
    max_samples: int = 5000
    center: bool = False


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    repr: ReprSection = field(default_factory=ReprSection)
    head: HeadSection = field(default_factory=HeadSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    averaging: AveragingSection = field(default_factory=AveragingSection)
    spectrum: SpectrumSection = field(default_factory=SpectrumSection)

    def validate(self) -> "ExperimentConfig":
        if self.experiment.kind not in KINDS:
            raise ConfigError(f"experiment.kind must be one of {KINDS}, got {self.experiment.kind!r}")
        if self.experiment.kind == "feature-file-classification" and not self.data.path:
            raise ConfigError("data.path is required for feature-file experiments")
        if self.backbone.activation not in ("erf", "tanh", "relu"):
            raise ConfigError(f"unknown activation {self.backbone.activation!r}")
        if any(h < 1 for h in self.backbone.hidden) or not self.backbone.hidden:
            raise ConfigError("backbone.hidden needs at least one positive width")
        t = self.repr
        if t.batch_size < 1 or t.base_lr <= 0 or t.swa_lr <= 0 or t.swa_epochs < 0:
            raise ConfigError("invalid training schedule")
        if list(t.milestones) != sorted(set(t.milestones)):
            raise ConfigError("repr.milestones must be strictly increasing")
        if not self.head.lambda_grid or not self.head.temperature_grid:
            raise ConfigError("head grids must be non-empty")
        if any(v < 0 for v in self.head.lambda_grid) or any(v <= 0 for v in self.head.temperature_grid):
            raise ConfigError("lambda must be >= 0 and temperatures > 0")
        if self.head.bins < 1:
            raise ConfigError("head.bins must be >= 1")
        p = self.protocol
        if min(p.way, p.shot, p.query, p.runs, p.episodes, p.val_episodes) < 1:
            raise ConfigError("protocol sizes must be >= 1")
        if any(not 0 <= a <= 1 for a in self.averaging.ema):
            raise ConfigError("EMA factors must lie in [0, 1]")
        if self.averaging.ema_cadence not in ("epoch", "step"):
            raise ConfigError("averaging.ema_cadence must be 'epoch' or 'step'")
        return self

    @property
    def is_regression(self) -> bool:
        return self.experiment.kind == "sine-regression"


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(_parse_value(part, inner, key) for part in raw.split(",") if part.strip())
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(float(raw)) if "e" in raw.lower() and float(raw).is_integer() else int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _hints(cls):
    return typing.get_type_hints(cls)


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    top = _hints(ExperimentConfig)
    items = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        items.append((key.strip(), value))
    items.extend((overrides or {}).items())
    for key, value in items:
        section, _, name = key.partition(".")
        if section not in top or not name:
            raise ConfigError(f"unknown key {key!r}")
        sec = getattr(cfg, section)
        hints = _hints(type(sec))
        if name not in hints:
            raise ConfigError(f"unknown key {key!r}")
        setattr(sec, name, _parse_value(str(value), hints[name], key))
    return cfg.validate()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), overrides)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parsing it back yields an equal config."""
    lines = []
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> bytes:
    return hashlib.sha256(dump_config(cfg).encode()).digest()
