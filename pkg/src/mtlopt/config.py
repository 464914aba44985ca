"""Run configuration: ``key = value`` text with ``[data]``, ``[model]`` and ``[optimizer]`` sections.

Keys before the first section header (``seed``, ``epochs``, ``batch_size``,
``out``) apply to the whole run.  Example::

    seed = 0
    epochs = 20

    [data]
    dataset = multimnist

    [model]
    encoder = 256, 64

    [optimizer]
    optimizer = fbls
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .linesearch import LineSearchConfig, Variant

OPTIMIZERS = ("sgd", "sgd-mgda", "mgda-ub", "bls", "fbls", "fbls-decay")
CONSTANT_STEP = ("sgd", "sgd-mgda", "mgda-ub")
LINE_SEARCH = ("bls", "fbls", "fbls-decay")
DATASETS = ("multimnist", "synth", "quadratic", "csv")


def default_lr_grid() -> tuple[float, ...]:
    """Eight learning rates log-evenly spaced over [1e-3, 1e-1]."""
    return tuple(float(v) for v in np.logspace(-3, -1, 8))


@dataclass
class DataConfig:
    dataset: str = "multimnist"
    source: str = "digits"  # "digits" or a directory of MNIST IDX files
    n_train: int = 4096
    n_test: int = 1024
    shift_px: int = 4
    d_in: int = 16
    d_z_true: int = 4
    tasks: int = 2
    noise_sd: float = 0.0
    centers: tuple[tuple[float, ...], ...] = ((1.0,), (-1.0,))
    theta0: tuple[float, ...] = (5.0,)
    train_csv: str | None = None
    test_csv: str | None = None


@dataclass
class ModelConfig:
    encoder: tuple[int, ...] = (256, 64)
    decoder: tuple[int, ...] = ()
    activation: str = "tanh"


@dataclass
class OptimizerConfig:
    optimizer: str = "fbls"
    lr: float | None = None
    beta: float = 0.1
    gamma: float = 0.5
    lr_ub: float = 1.0
    eps_floor: float = 1e-10
    variant: str = "Both"
    decay_rate: float = 0.5
    decay_period: int = 10
    strategies: tuple[str, ...] = ("sgd", "bls", "fbls")
    lr_grid: tuple[float, ...] = field(default_factory=default_lr_grid)


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    epochs: int = 20
    batch_size: int = 256
    out: str | None = None

    def line_search(self, optimizer: str | None = None) -> LineSearchConfig:
        name = optimizer or self.optim.optimizer
        o = self.optim
        variant = Variant.CLASSICAL_BOTH if name == "bls" else Variant(o.variant)
        decay = (o.decay_rate, o.decay_period) if name == "fbls-decay" else (None, None)
        return LineSearchConfig(o.beta, o.gamma, o.lr_ub, o.eps_floor, variant, *decay)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.data.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.data.dataset!r}; expected one of {', '.join(DATASETS)}")
        if self.data.dataset == "csv" and not (self.data.train_csv and self.data.test_csv):
            raise ConfigError("dataset = csv needs train_csv and test_csv")
        if self.data.dataset == "quadratic":
            dims = {len(c) for c in self.data.centers}
            if len(dims) != 1 or dims != {len(self.data.theta0)}:
                raise ConfigError("quadratic centers and theta0 must share one dimension")
        if self.model.activation not in ("identity", "relu", "tanh"):
            raise ConfigError(f"unknown activation {self.model.activation!r}")
        if not self.model.encoder:
            raise ConfigError("model.encoder needs at least the latent width")
        o = self.optim
        if o.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {o.optimizer!r}; expected one of {', '.join(OPTIMIZERS)}")
        for s in o.strategies:
            if s not in OPTIMIZERS:
                raise ConfigError(f"unknown strategy {s!r} in strategies")
        if o.optimizer in CONSTANT_STEP and o.lr is None:
            raise ConfigError(f"optimizer {o.optimizer} requires lr")
        if o.lr is not None and o.lr <= 0:
            raise ConfigError("lr must be positive")
        try:
            Variant(o.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {o.variant!r}") from None
        if o.optimizer in ("fbls", "fbls-decay") and Variant(o.variant) is Variant.CLASSICAL_BOTH:
            raise ConfigError("fbls needs a latent variant (Both, TaskNormOnly, DirectionOnly)")
        self.line_search(o.optimizer if o.optimizer in LINE_SEARCH else "fbls-decay")
        return self


# ---------------------------------------------------------------------------
# text <-> config


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _words(s: str) -> tuple[str, ...]:
    return tuple(v for v in s.replace(",", " ").split())


def _vectors(s: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(part) for part in s.split(";") if part.strip())


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("", "none") else s.strip()


_CONVERT = {int: int, float: float, str: str.strip}

_SPECIAL = {
    ("data", "centers"): (_vectors, lambda v: "; ".join(", ".join(repr(x) for x in c) for c in v)),
    ("data", "theta0"): (_floats, lambda v: ", ".join(repr(x) for x in v)),
    ("data", "train_csv"): (_opt_str, str),
    ("data", "test_csv"): (_opt_str, str),
    ("model", "encoder"): (_ints, lambda v: ", ".join(map(str, v))),
    ("model", "decoder"): (_ints, lambda v: ", ".join(map(str, v))),
    ("optimizer", "lr"): (_opt_float, repr),
    ("optimizer", "strategies"): (_words, ", ".join),
    ("optimizer", "lr_grid"): (_floats, lambda v: ", ".join(repr(x) for x in v)),
    ("run", "out"): (_opt_str, str),
}

_SECTIONS = {"run": None, "data": "data", "model": "model", "optimizer": "optim"}


def _target(cfg: TrainConfig, section: str):
    attr = _SECTIONS[section]
    return cfg if attr is None else getattr(cfg, attr)


def _fields(section: str):
    cls = {"run": TrainConfig, "data": DataConfig, "model": ModelConfig, "optimizer": OptimizerConfig}[section]
    skip = {"data", "model", "optim"} if section == "run" else set()
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


def parse_config(text: str) -> TrainConfig:
    """Parse and validate config text, filling documented defaults."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                   comment_prefixes=("#",), default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from e
    cfg = TrainConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        known = _fields(section)
        target = _target(cfg, section)
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            conv = _SPECIAL.get((section, key), (None,))[0]
            if conv is None:
                conv = _CONVERT[type(getattr(target, key))]
            try:
                setattr(target, key, conv(raw))
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from None
    return cfg.validate()


def serialize_config(cfg: TrainConfig) -> str:
    lines = []
    for section in _SECTIONS:
        target = _target(cfg, section)
        if section != "run":
            lines.append(f"\n[{section}]")
        for key in _fields(section):
            value = getattr(target, key)
            if value is None:
                continue
            fmt = _SPECIAL.get((section, key), (None, None))[1]
            if fmt is None:
                fmt = repr if isinstance(value, float) else str
            lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
