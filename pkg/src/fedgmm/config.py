"""Experiment configuration: a sectioned key=value file plus CLI overrides.

Example::

    [run]
    seed = 7
    out = runs/demo

    [data]
    family = gaussian
    M = 3

    [federation]
    m1 = 3
    rounds = 100

Unknown sections or keys are rejected.
"""

import configparser
from dataclasses import asdict, dataclass, field, fields

from .datagen import SyntheticSpec
from .errors import ConfigError
from .federation import FederationConfig


@dataclass
class RunOptions:
    seed: int = 0
    out: str = "out"
    workers: int = 1


@dataclass
class EvalOptions:
    steps: int = 20
    holdout: float = 0.0
    shift_scale: float = 0.5
    shift_angle: float = 90.0
    shift_plane: str = "0,1"
    reflect_axis: int = -1  # -1: no reflection
    score: str = "joint"


SECTIONS = {"run": RunOptions, "data": SyntheticSpec, "federation": FederationConfig, "eval": EvalOptions}


@dataclass
class ExperimentConfig:
    run: RunOptions = field(default_factory=RunOptions)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    federation: FederationConfig = field(default_factory=FederationConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def finalize(self):
        """Propagate the master seed and worker count, then validate everything."""
        self.data.seed = self.run.seed
        self.federation.seed = self.run.seed
        self.federation.workers = self.run.workers
        if self.data.family == "figure1":
            self.data.d = 1  # one-dimensional by construction
        self.data.validate()
        self.federation.validate()
        if self.eval.steps < 0:
            raise ConfigError("eval.steps must be >= 0")
        if not 0 <= self.eval.holdout < 1:
            raise ConfigError("eval.holdout must lie in [0, 1)")
        if self.eval.score not in ("joint", "marginal", "conditional"):
            raise ConfigError("eval.score must be joint, marginal or conditional")
        return self

    def to_text(self):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(value, default, key):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value.strip()


def set_value(cfg, section, key, value):
    """Set ``section.key`` from a string (or typed) value; rejects unknown keys."""
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    default = getattr(obj, key)
    if isinstance(value, str) and not isinstance(default, str):
        value = _coerce(value, default, f"{section}.{key}")
    setattr(obj, key, value)


def load_config(path=None):
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in cp.sections():
        for key, value in cp[section].items():
            set_value(cfg, section, key, value)
    return cfg
