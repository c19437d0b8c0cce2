"""Declarative experiment configs: strict JSON parsing, presets, and builders.

A config is a JSON object with a ``mode`` and one section per concern.
Unknown keys anywhere are rejected with the line they appear on.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .envs import CartPoleEnv, Nav2dEnv
from .policy import RbfGaussianPolicy, grid_centers
from .train import TrainConfig

__all__ = [
    "ConfigError",
    "EnvConfig",
    "PolicyConfig",
    "FlowConfig",
    "CertifyConfig",
    "ValidateConfig",
    "ExperimentConfig",
    "PRESETS",
    "preset",
    "load_config",
    "parse_config",
    "build_env",
    "build_policy",
]

MODES = ("flow", "train", "validate", "certify")


class ConfigError(ValueError):
    pass


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    if not m:
        return ""
    return f" (line {text.count(chr(10), 0, m.start()) + 1})"


def _strict(cls, data, section: str, text: str | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown key {k!r} in section {section!r}{_line_of(text, k)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


@dataclass
class EnvConfig:
    name: str = "nav2d"
    obstacles: list | None = None
    start_low: list | None = None
    start_high: list | None = None
    horizon: int | None = None
    gamma: float | None = None
    epsilon: float | None = None
    dt: float | None = None
    distance_sign: float | None = None

    def __post_init__(self):
        if self.name not in ("nav2d", "cartpole"):
            raise ValueError(f"unknown environment {self.name!r}; use nav2d or cartpole")
        if self.name == "cartpole" and (self.obstacles is not None or self.start_low is not None
                                        or self.start_high is not None or self.distance_sign is not None):
            raise ValueError("obstacles, start region and distance_sign apply to nav2d only")


@dataclass
class PolicyConfig:
    centers_per_dim: list = field(default_factory=lambda: [20, 20])
    centers_low: list | None = None
    centers_high: list | None = None
    rbf_variance: float = 0.5
    action_variance: float = 0.5

    def __post_init__(self):
        if not self.rbf_variance > 0 or not self.action_variance > 0:
            raise ValueError("variances must be positive")


@dataclass
class FlowConfig:
    fixture: str = "disk"
    alpha: float = 1.0
    beta: float = 1.0
    iterations: int = 10000
    theta0: list = field(default_factory=lambda: [0.0, 0.0])
    schedule: str = "constant"
    h: float | None = None
    tol: float = 1e-4


@dataclass
class CertifyConfig:
    margin: float | None = None
    v_hat: float | None = None
    alpha: float | None = None
    h: float | None = None
    beta: float | None = None
    L: float | None = None
    r_norm: float | None = None
    delta: float = 0.1
    phi: float = 1.0
    phi_bar: float | None = None
    psi: float | None = None
    psi_bar: float | None = None
    d: int = 1
    q: int = 1
    horizon: int = 1

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass
class ValidateConfig:
    batches: int = 20000
    batch_size: int = 2
    theta: list = field(default_factory=lambda: [0.3, -0.2])
    behavior_theta: list = field(default_factory=lambda: [0.0, 0.1])
    clip: list | None = None
    epsilons: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    horizon: int = 2
    gamma: float = 0.9
    tail_trials: int = 10000
    tail_batch_size: int = 50


SECTIONS = {"env": EnvConfig, "policy": PolicyConfig, "train": TrainConfig, "flow": FlowConfig,
            "certify": CertifyConfig, "validate": ValidateConfig}


@dataclass
class ExperimentConfig:
    mode: str = "train"
    seed: int = 0
    out: str | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    certify: CertifyConfig = field(default_factory=CertifyConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; use one of {', '.join(MODES)}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")  # the top-level seed is authoritative
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict, text: str | None = None, default_mode: str | None = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        if default_mode is not None and "mode" not in data:
            data = {**data, "mode": default_mode}
        top = {"mode", "seed", "out"} | set(SECTIONS)
        for k in data:
            if k not in top:
                raise ConfigError(f"unknown key {k!r} at top level{_line_of(text, k)}")
        if isinstance(data.get("train"), dict) and "seed" in data["train"]:
            raise ConfigError(f"set the seed at top level, not in 'train'{_line_of(text, 'seed')}")
        kwargs = {k: data[k] for k in ("mode", "seed", "out") if k in data}
        for name, sec in SECTIONS.items():
            if name in data:
                kwargs[name] = _strict(sec, data[name], name, text)
        return cls(**kwargs)


def parse_config(text: str, source: str = "<config>", default_mode: str | None = None) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return ExperimentConfig.from_dict(data, text, default_mode)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path, default_mode: str | None = None) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path), default_mode)


# -- presets ---------------------------------------------------------------------------

_NAV_TRAIN = dict(episodes_per_iteration=100, iterations=1500, replay="last_two", alpha=9.0, beta=1.0,
                  schedule="constant", h=0.1, bound_C=800.0, clip=[0.8, 1.2], baseline="zero")
_CART_TRAIN = dict(episodes_per_iteration=30, iterations=300, replay="current", updates_per_iteration=2,
                   alpha=0.1, beta=1.0, schedule="normalized", h=1e-3, h_r=0.02, bound_C=2000.0,
                   clip=[0.8, 1.2], baseline="binned")
_CART_POLICY = dict(centers_per_dim=[10, 5, 5, 4], centers_low=list(CartPoleEnv.state_low),
                    centers_high=list(CartPoleEnv.state_high), rbf_variance=0.5, action_variance=0.5)


def _preset_dict(name: str) -> dict:
    if name == "nav2d-paper":
        return {"mode": "train", "seed": 0, "env": {"name": "nav2d"},
                "policy": {"centers_per_dim": [20, 20], "rbf_variance": 0.5, "action_variance": 0.5},
                "train": dict(_NAV_TRAIN)}
    if name == "nav2d-desk":
        d = _preset_dict("nav2d-paper")
        d["train"].update(iterations=150, episodes_per_iteration=30)
        return d
    if name == "cartpole-paper":
        return {"mode": "train", "seed": 0, "env": {"name": "cartpole"}, "policy": dict(_CART_POLICY),
                "train": dict(_CART_TRAIN)}
    if name == "cartpole-desk":
        d = _preset_dict("cartpole-paper")
        d["train"].update(iterations=30)
        return d
    if name in ("flow-disk", "flow-quadratic", "flow-rosenbrock"):
        fixture = name.split("-", 1)[1]
        return {"mode": "flow", "seed": 0, "flow": {"fixture": fixture}}
    if name == "certify-example":
        return {"mode": "certify", "seed": 0,
                "certify": {"v_hat": -1.0, "alpha": 1.0, "h": 0.1, "beta": 1.0, "L": 2.0, "r_norm": 1.0,
                            "delta": 0.1, "phi": 1.75, "q": 1, "horizon": 1}}
    if name == "validate-tabular":
        return {"mode": "validate", "seed": 0, "validate": {}}
    raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")


PRESETS = ("nav2d-paper", "nav2d-desk", "cartpole-paper", "cartpole-desk", "flow-disk", "flow-quadratic",
           "flow-rosenbrock", "certify-example", "validate-tabular")


def preset(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(copy.deepcopy(_preset_dict(name)))


# -- builders ----------------------------------------------------------------------------

def build_env(cfg: EnvConfig):
    kw = {k: v for k, v in asdict(cfg).items() if k != "name" and v is not None}
    if cfg.name == "nav2d":
        if "obstacles" in kw:
            kw["obstacles"] = tuple(tuple(float(x) for x in r) for r in kw["obstacles"])
        for k in ("start_low", "start_high"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return Nav2dEnv(**kw)
    return CartPoleEnv(**kw)


def build_policy(cfg: PolicyConfig, env) -> RbfGaussianPolicy:
    low = cfg.centers_low if cfg.centers_low is not None else list(env.state_low)
    high = cfg.centers_high if cfg.centers_high is not None else list(env.state_high)
    counts = list(cfg.centers_per_dim)
    if not (len(low) == len(high) == len(counts) == env.state_dim):
        raise ConfigError("policy center grid must match the state dimension")
    if isinstance(env, Nav2dEnv):
        a_lo, a_hi = [-env.velocity_limit] * 2, [env.velocity_limit] * 2
    else:
        a_lo, a_hi = [-env.force_limit], [env.force_limit]
    return RbfGaussianPolicy(grid_centers(low, high, counts), cfg.rbf_variance, cfg.action_variance, a_lo, a_hi)

