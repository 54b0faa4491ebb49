"""Run configuration: dataclasses plus TOML load/save.

A RunConfig bundles the model hyperparameters, training knobs, toy-data
description, and cost-model options. Parsing is strict: unknown sections or
keys are rejected so typos fail loudly instead of silently using defaults.
Serialization emits a stable, fully-populated document; parse(serialize(c))
reproduces c exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigError
from .review import ReviewConfig
from .tesa import TesaConfig

CONFIG_SCHEMA = "matekit-config/1"


@dataclass(frozen=True)
class MateConfig:
    """Model hyperparameters shared by the blocks and the cost model."""

    d: int = 16
    expansion: int = 2        # E: width multiplier of the scan branch
    d_state: int = 16         # d_s
    d_head: int = 8           # d_h
    conv_kernel: int = 4      # K, cost model only
    layers: int = 2
    combine: str = "sum"
    review: ReviewConfig = field(default_factory=ReviewConfig)
    tesa: TesaConfig = field(default_factory=TesaConfig)

    def __post_init__(self) -> None:
        for name in ("d", "expansion", "d_state", "d_head", "conv_kernel", "layers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"model.{name} must be a positive int, got {v!r}")
        if (self.expansion * self.d) % self.d_head != 0:
            raise ConfigError(
                f"expansion*d = {self.expansion * self.d} must be divisible by "
                f"d_head = {self.d_head}")
        if self.d % self.tesa.heads != 0:
            raise ConfigError(
                f"d = {self.d} must be divisible by tesa.heads = {self.tesa.heads}")
        if self.combine not in ("sum", "concat_project"):
            raise ConfigError(f"model.combine must be 'sum' or 'concat_project', "
                              f"got {self.combine!r}")

    @property
    def inner_dim(self) -> int:
        return self.expansion * self.d

    @property
    def scan_heads(self) -> int:
        return self.inner_dim // self.d_head


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.01
    batch: int = 8
    momentum: float = 0.9   # sgd only
    beta1: float = 0.9      # adam only
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adam' or 'sgd', "
                              f"got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")
        if self.batch < 1:
            raise ConfigError("train.batch must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    """Moving-square toy videos: a lit square translating on a dark field."""

    t: int = 4
    h: int = 8
    w: int = 8
    square: int = 3
    amplitude: float = 1.0
    vmax: int = 1

    def __post_init__(self) -> None:
        for name in ("t", "h", "w", "square"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"data.{name} must be a positive int, got {v!r}")
        if self.square > min(self.h, self.w):
            raise ConfigError("data.square must fit inside the frame")
        if self.vmax < 0:
            raise ConfigError("data.vmax must be >= 0")


@dataclass(frozen=True)
class CostOptions:
    bidirectional: bool = True
    baseline_d: int = 0  # 0 means: use the model width
    durations_s: tuple[int, ...] = (17, 34, 68)
    duration_tokens: tuple[int, ...] = (34816, 69632, 139264)

    def __post_init__(self) -> None:
        object.__setattr__(self, "durations_s", tuple(self.durations_s))
        object.__setattr__(self, "duration_tokens", tuple(self.duration_tokens))
        if self.baseline_d < 0:
            raise ConfigError("cost.baseline_d must be >= 0")
        if len(self.durations_s) != len(self.duration_tokens):
            raise ConfigError("cost.durations_s and cost.duration_tokens must "
                              "have equal length")
        if any(n < 1 for n in self.duration_tokens):
            raise ConfigError("cost.duration_tokens must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: MateConfig = field(default_factory=MateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    cost: CostOptions = field(default_factory=CostOptions)
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError("run.seed must be >= 0")
        if self.threads < 1:
            raise ConfigError("run.threads must be >= 1")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

# section -> (toml key -> dataclass field) for flat scalar sections
_SECTION_FIELDS = {
    "model": {"d": "d", "expansion": "expansion", "d_state": "d_state",
              "d_head": "d_head", "conv_kernel": "conv_kernel",
              "layers": "layers", "combine": "combine"},
    "review": {"enabled": "enabled", "pt": "p_t", "py": "p_y", "px": "p_x",
               "min_tokens": "min_tokens"},
    "tesa": {"tw": "t_window", "sw": "s_window", "heads": "heads"},
    "train": {"optimizer": "optimizer", "lr": "lr", "batch": "batch",
              "momentum": "momentum", "beta1": "beta1", "beta2": "beta2",
              "eps": "eps"},
    "data": {"t": "t", "h": "h", "w": "w", "square": "square",
             "amplitude": "amplitude", "vmax": "vmax"},
    "cost": {"bidirectional": "bidirectional", "baseline_d": "baseline_d",
             "durations_s": "durations_s", "duration_tokens": "duration_tokens"},
    "run": {"seed": "seed", "threads": "threads"},
}


def _section_kwargs(section: str, table: dict) -> dict:
    mapping = _SECTION_FIELDS[section]
    unknown = sorted(set(table) - set(mapping))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[mapping[key]] = value
    return kwargs


def parse_config(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    unknown = sorted(set(doc) - set(_SECTION_FIELDS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for name, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level key {name!r} must be a [{name}] table")

    review = ReviewConfig(**_section_kwargs("review", doc.get("review", {})))
    tesa = TesaConfig(**_section_kwargs("tesa", doc.get("tesa", {})))
    model = MateConfig(review=review, tesa=tesa,
                       **_section_kwargs("model", doc.get("model", {})))
    train = TrainConfig(**_section_kwargs("train", doc.get("train", {})))
    data = DataConfig(**_section_kwargs("data", doc.get("data", {})))
    cost = CostOptions(**_section_kwargs("cost", doc.get("cost", {})))
    run_kwargs = _section_kwargs("run", doc.get("run", {}))
    return RunConfig(model=model, train=train, data=data, cost=cost, **run_kwargs)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, tuple):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize value {v!r}")


def serialize_config(cfg: RunConfig) -> str:
    """Render a RunConfig as TOML with every key written explicitly."""
    sources = {
        "model": cfg.model, "review": cfg.model.review, "tesa": cfg.model.tesa,
        "train": cfg.train, "data": cfg.data, "cost": cfg.cost, "run": cfg,
    }
    out = io.StringIO()
    out.write(f"# {CONFIG_SCHEMA}\n")
    for section, mapping in _SECTION_FIELDS.items():
        out.write(f"\n[{section}]\n")
        src = sources[section]
        for key, attr in mapping.items():
            out.write(f"{key} = {_format_value(getattr(src, attr))}\n")
    return out.getvalue()


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_config(cfg))


def with_model(cfg: RunConfig, **model_updates) -> RunConfig:
    """Convenience: replace fields of the nested model config."""
    return replace(cfg, model=replace(cfg.model, **model_updates))
