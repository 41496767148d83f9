"""Experiment configuration: one YAML (or JSON) file mirroring the dataclasses.

Unknown keys are rejected so typos fail loudly. ``apply_overrides`` takes
dotted ``key=value`` strings (``train.epochs=5``) with YAML-typed values.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dataset import NSConfig
from .distill import A2DConfig, DistillPlan
from .nn.models import ModelSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class DataConfig:
    generator: str = "navier_stokes"  # or "waves"
    n_sequences: int = 120
    T: int = 20
    input_len: int = 10
    horizon: int = 10
    counts: tuple[int, int, int] | None = (100, 10, 10)
    ns: dict = field(default_factory=dict)  # NSConfig fields other than seed
    # waves only: list of [kx, ky, amplitude, phase_speed]
    modes: list = field(default_factory=lambda: [[2, 0, 1.0, 0.3], [6, 8, 0.5, 0.7]])
    wave_grid: tuple[int, int] = (32, 32)
    wave_dt: float = 1.0

    def __post_init__(self):
        if self.generator not in ("navier_stokes", "waves"):
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.counts is not None:
            self.counts = tuple(self.counts)
        self.wave_grid = tuple(self.wave_grid)

    def ns_config(self, seed: int) -> NSConfig:
        return NSConfig(seed=seed, **{k: tuple(v) if k == "grid" else v for k, v in self.ns.items()})

    @property
    def grid(self) -> tuple[int, int]:
        if self.generator == "waves":
            return self.wave_grid
        return tuple(self.ns.get("grid", NSConfig().grid))


@dataclass
class EvalConfig:
    split: str = "test"
    cutoff: float | None = None
    bench_repeats: int = 30
    bench_batch: int = 8
    plot: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 42
    data: DataConfig = field(default_factory=DataConfig)
    teachers: list = field(default_factory=lambda: [{"kind": "st_alternet"}, {"kind": "simvp"}])
    student: dict = field(default_factory=lambda: {"kind": "unet"})
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher_train: dict = field(default_factory=dict)  # overrides of ``train`` for teachers
    distill: DistillPlan = field(default_factory=lambda: DistillPlan(mode="aekd"))
    a2d: A2DConfig = field(default_factory=A2DConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def _io(self) -> dict:
        return dict(in_frames=self.data.input_len, out_frames=self.data.horizon, grid=self.data.grid)

    def teacher_specs(self) -> list[ModelSpec]:
        return [ModelSpec(**{**self._io(), **t}) for t in self.teachers]

    def student_spec(self) -> ModelSpec:
        """Student at a quarter of the first teacher's width unless ``hidden_dim`` is given."""
        spec = dict(self.student)
        kind = spec.pop("kind")
        return self.teacher_specs()[0].student_of(kind, **spec)

    def teacher_train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, **self.teacher_train)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


_SECTIONS = {
    "data": DataConfig,
    "train": TrainConfig,
    "distill": DistillPlan,
    "a2d": A2DConfig,
    "eval": EvalConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be a mapping")
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    for t in cfg.teachers:
        if "kind" not in t:
            raise ConfigError("every teacher needs a kind")
    if "kind" not in cfg.student:
        raise ConfigError("student needs a kind")
    try:
        cfg.teacher_specs(), cfg.student_spec(), cfg.teacher_train_config()
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return config_from_dict(_load_yaml(path.read_text()))


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Return a new config with ``section.key=value`` overrides applied."""
    raw = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node, parts = raw, key.split(".")
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            elif p in node and isinstance(node[p], (dict, list)):
                node = node[p]
            else:
                raise ConfigError(f"unknown config path {key!r}")
        leaf = parts[-1]
        if isinstance(node, list):
            node[int(leaf)] = _load_yaml(value)
        else:
            node[leaf] = _load_yaml(value)
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
