"""Training configuration and its INI-style file format.

A config file is a set of ``[section]`` blocks holding ``key = value``
lines. Section names only group keys for readability; every key must be a
:class:`TrainConfig` field and anything unrecognised is rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .envs import ENVS, OBS_MODES
from .errors import ConfigError

SECTIONS = ("env", "rollout", "network", "optim", "exploration", "critic", "run")


@dataclass(frozen=True)
class TrainConfig:
    # env
    env_id: str = "PointMass2D"
    obs_mode: str = "state"
    proprio: bool = False
    # rollout
    N: int = 8
    M: int = 15
    H: int = 16
    gamma: float = 0.99
    lam: float = 0.95
    trace_mode: str = "trace"
    normalize_dj: bool = True
    stagger_episodes: bool = True
    # network
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    conv_feature_dim: int = 32
    # optim
    lr_actor: float = 2e-3
    lr_critic: float = 2e-3
    lr_explore: float = 3e-2
    lr_temperature: float = 1e-2
    actor_schedule: str = "cosine"
    actor_warmup: int = 10
    actor_eta_min: float = 1e-5
    critic_schedule: str = "linear"
    critic_lr_start: float = 1.0
    critic_lr_end: float = 0.1
    max_grad_norm: float = 1.0
    # exploration
    actor_entropy: bool = True
    soft_critic: bool = False
    auto_temperature: bool = True
    init_temperature: float = 1e-2
    delta_target: float = 0.15
    log_std_init: float = -0.6931471805599453  # log(0.5)
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    preact_clip_lo: float = -2.0
    preact_clip_hi: float = 2.0
    # critic
    rho: float = 0.2
    critic_iters: int = 2
    critic_batch: int = 4096
    # run
    epochs: int = 300
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_interval: int = 50
    workers: int = 1
    env_budget: int = 8192
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env_id not in ENVS:
            raise ConfigError(f"env_id: unknown environment {self.env_id!r}; choose from {sorted(ENVS)}")
        if self.obs_mode not in OBS_MODES:
            raise ConfigError(f"obs_mode: must be one of {OBS_MODES}")
        if self.trace_mode not in ("trace", "bootstrap"):
            raise ConfigError("trace_mode: must be 'trace' or 'bootstrap'")
        for name in ("N", "M", "H", "critic_iters", "critic_batch", "workers", "conv_feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval: must be >= 0")
        for name in ("lr_actor", "lr_critic", "lr_explore", "lr_temperature", "max_grad_norm",
                     "init_temperature", "delta_target"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name}: must be a positive finite number")
        if self.N * (self.M + 1) > self.env_budget:
            raise ConfigError(f"N*(M+1) = {self.N * (self.M + 1)} exceeds env_budget = {self.env_budget}")
        if not self.preact_clip_lo < self.preact_clip_hi:
            raise ConfigError("preact_clip_lo must be below preact_clip_hi")
        if not self.log_std_min < self.log_std_max:
            raise ConfigError("log_std_min must be below log_std_max")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma: must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam: must lie in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho: must lie in [0, 1]")
        for name in ("actor_schedule", "critic_schedule"):
            if getattr(self, name) not in ("cosine", "linear", "constant"):
                raise ConfigError(f"{name}: must be cosine, linear or constant")
        if any(w < 1 for w in self.actor_hidden + self.critic_hidden):
            raise ConfigError("hidden widths must be positive")

    @property
    def preact_clip(self) -> tuple[float, float]:
        return (self.preact_clip_lo, self.preact_clip_hi)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("actor_hidden", "critic_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(p) for p in raw.replace("[", "").replace("]", "").split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"field {name!r}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, source: str = "<string>") -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep N, M, H case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {SECTIONS}")
        for key, raw in parser.items(section):
            if key not in _FIELDS:
                raise ConfigError(f"{source}: [{section}] unknown field {key!r}")
            if key in values:
                raise ConfigError(f"{source}: field {key!r} set twice")
            values[key] = _parse_value(key, raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config` (everything lands in one section per group)."""
    groups = {
        "env": ("env_id", "obs_mode", "proprio"),
        "rollout": ("N", "M", "H", "gamma", "lam", "trace_mode", "normalize_dj",
                    "stagger_episodes"),
        "network": ("actor_hidden", "critic_hidden", "conv_feature_dim"),
        "optim": ("lr_actor", "lr_critic", "lr_explore", "lr_temperature", "actor_schedule",
                  "actor_warmup", "actor_eta_min", "critic_schedule", "critic_lr_start",
                  "critic_lr_end", "max_grad_norm"),
        "exploration": ("actor_entropy", "soft_critic", "auto_temperature", "init_temperature",
                        "delta_target", "log_std_init", "log_std_min", "log_std_max",
                        "preact_clip_lo", "preact_clip_hi"),
        "critic": ("rho", "critic_iters", "critic_batch"),
        "run": ("epochs", "seed", "out_dir", "checkpoint_interval", "workers", "env_budget",
                "record_wall_time"),
    }
    lines = []
    for section, names in groups.items():
        lines.append(f"[{section}]")
        for name in names:
            v = getattr(cfg, name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{name} = {v}")
        lines.append("")
    return "\n".join(lines)


# Full-size values for the shared hyperparameters; far too large for CI.
LARGE_SCALE = dict(
    N=64,
    M=63,
    gamma=0.99,
    lam=0.95,
    critic_batch=4096,
    critic_iters=2,
    preact_clip_lo=-2.0,
    preact_clip_hi=2.0,
    max_grad_norm=1.0,
    actor_schedule="cosine",
    actor_warmup=100,
    actor_eta_min=1e-5,
    critic_schedule="linear",
    critic_lr_start=1.0,
    critic_lr_end=0.1,
    delta_target=0.15,
    init_temperature=1e-2,
    log_std_min=-5.0,
    log_std_max=2.0,
    normalize_dj=True,
)
