"""Run configuration: dataclasses plus an INI-style reader/writer.

Sections ``[model]``, ``[train]``, ``[data]``, ``[noise]`` and ``[epdms]`` hold
``key = value`` lines; ``#`` starts a comment. Tuples are comma separated.
"""

from __future__ import annotations

import configparser
import math
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import AVG_METRICS, EGO_RADIUS
from .model import ModelConfig
from .scene import NoiseModel, SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    w_plan: float = 1.0
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    lr_schedule: str = "constant"  # or "cosine" (decays to 0 within each stage)
    seed: int = 0

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.w_plan < 0 or self.grad_clip < 0:
            raise ConfigError("w_plan and grad_clip must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def learning_rate_at(self, epoch: int, n_epochs: int) -> float:
        if self.lr_schedule == "constant" or n_epochs <= 1:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / n_epochs))


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 256
    n_test: int = 128
    n_lanes: int = 3
    n_agents: int = 4
    complexity: str = "complex"
    k_static: int = 20
    feature_dim: int = 64
    max_curvature: float = 0.03
    straight_fraction: float = 0.3
    dt: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("scene counts must be >= 0")

    def scene_spec(self) -> SceneSpec:
        try:
            return SceneSpec(n_lanes=self.n_lanes, n_agents=self.n_agents, dt=self.dt,
                             complexity=self.complexity, seed=self.seed, k_static=self.k_static,
                             feature_dim=self.feature_dim, max_curvature=self.max_curvature,
                             straight_fraction=self.straight_fraction)
        except ValueError as exc:
            raise ConfigError(f"[data] {exc}") from None


@dataclass(frozen=True)
class EpdmsConfig:
    w_TTC: float = 1.0
    w_EP: float = 1.0
    w_HC: float = 1.0
    w_LK: float = 1.0
    w_EC: float = 1.0
    ego_radius: float = EGO_RADIUS

    def __post_init__(self):
        w = list(self.weights().values())
        if any(x < 0 for x in w) or not sum(w) > 0:
            raise ConfigError("[epdms] weights must be >= 0 with a positive sum")
        if not self.ego_radius > 0:
            raise ConfigError("[epdms] ego_radius must be > 0")

    def weights(self) -> dict:
        return {m: getattr(self, f"w_{m}") for m in AVG_METRICS}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(0.1, 0.01, 0.3))
    epdms: EpdmsConfig = field(default_factory=EpdmsConfig)

    def __post_init__(self):
        if self.model.d_in != self.data.feature_dim:
            raise ConfigError(f"[model] d_in={self.model.d_in} must equal [data] feature_dim={self.data.feature_dim}")
        if self.model.k_static != self.data.k_static:
            raise ConfigError(f"[model] k_static={self.model.k_static} must equal [data] k_static={self.data.k_static}")

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed drives data, initialisation and batch order."""
        return dataclasses.replace(self, model=dataclasses.replace(self.model, seed=seed),
                                   train=dataclasses.replace(self.train, seed=seed),
                                   data=dataclasses.replace(self.data, seed=seed))

    def with_model(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **kw))


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "noise": NoiseModel,
            "epdms": EpdmsConfig}


def _parse_value(cls, key: str, raw: str, section: str):
    f = {x.name: x for x in dataclasses.fields(cls)}.get(key)
    if f is None:
        raise ConfigError(f"[{section}] unknown key {key!r}")
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    raw = raw.strip()
    try:
        if t == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if t == "int":
            return int(raw, 0)
        if t == "float":
            return float(raw)
        if t.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {t}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        kw = {k: _parse_value(cls, k, v, name) for k, v in cp[name].items()} if cp.has_section(name) else {}
        try:
            parts[name] = cls(**kw) if name != "noise" or kw else RunConfig().noise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        obj = getattr(cfg, name)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
