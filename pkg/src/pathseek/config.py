"""Presets and TOML run configuration shared by every CLI subcommand."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .budget import CostModel
from .dynamics import ModelConfig
from .pyramid import PyramidConfig
from .reasoner import ReasonerConfig
from .training import TrainConfig

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class BenchConfig:
    num_instances: int = 700
    fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
    k_grid: tuple[int, ...] = (2, 5, 10)
    delta_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    baseline_epochs: int = 20
    baseline_hidden: int = 32
    baseline_lr: float = 1e-3

    def validate(self) -> None:
        if self.num_instances < 3:
            raise ValueError("BenchConfig.num_instances: must be >= 3")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ValueError("BenchConfig.fractions: three positive split fractions summing to 1")
        if not self.k_grid or min(self.k_grid) < 1:
            raise ValueError("BenchConfig.k_grid: values must be >= 1")
        if not self.delta_grid or min(self.delta_grid) < 0:
            raise ValueError("BenchConfig.delta_grid: values must be >= 0")


_DESK = {
    "pyramid": {},
    "model": {},
    "reasoner": {},
    "training": {"epochs": 6},
    "bench": {},
    "costs": {},
}

_PAPER = {
    "pyramid": {"num_scales": 4, "feature_dim": 1024},
    "model": {
        "d_model": 4096,
        "d_input": 1024,
        "memory_length": 30,
        "memory_hidden": 64,
        "heads": 16,
        "head_dim": 64,
        "n_synch_out": 150,
        "n_synch_action": 150,
        "synapse_depth": 12,
        "dropout": 0.05,
    },
    "reasoner": {"ticks_per_scale": 20, "num_scales": 4, "top_k": 10, "confidence_threshold": 0.9},
    "training": {
        "epochs": 50,
        "learning_rate": 5e-5,
        "warmup_steps": 5000,
        "schedule": "cosine",
        "weight_decay": 0.0,
        "batch_size": 1,
        "grad_clip": -1.0,
        "milestone_interval": 8000,
        "gamma": 0.1,
        "keep_best": False,
    },
    "bench": {},
    "costs": {},
}

SECTIONS = {
    "pyramid": PyramidConfig,
    "model": ModelConfig,
    "reasoner": ReasonerConfig,
    "training": TrainConfig,
    "bench": BenchConfig,
    "costs": CostModel,
}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    costs: CostModel = field(default_factory=CostModel)

    @property
    def total_ticks(self) -> int:
        return self.reasoner.ticks_per_scale * self.reasoner.num_scales

    def validate(self) -> None:
        self.pyramid.validate()
        self.model.validate()
        self.reasoner.validate()
        self.training.validate()
        self.bench.validate()
        if self.model.d_input != self.pyramid.feature_dim:
            raise ValueError(f"model.d_input={self.model.d_input} must equal pyramid.feature_dim={self.pyramid.feature_dim}")
        if self.model.num_classes != self.pyramid.num_classes:
            raise ValueError(f"model.num_classes={self.model.num_classes} must equal pyramid.num_classes={self.pyramid.num_classes}")
        if self.reasoner.num_scales > self.pyramid.num_scales:
            raise ValueError(f"reasoner.num_scales={self.reasoner.num_scales} exceeds pyramid.num_scales={self.pyramid.num_scales}")

    def with_seed(self, seed: int) -> RunConfig:
        """Thread one seed through data, model, inference and training RNGs (the frozen encoder keeps its own)."""
        return replace(
            self,
            pyramid=replace(self.pyramid, seed=seed),
            model=replace(self.model, seed=seed),
            reasoner=replace(self.reasoner, seed=seed),
            training=replace(self.training, seed=seed),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(cls, section: str, values: dict) -> dict:
    names = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise ValueError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    out = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        out[k] = tuple(v) if isinstance(default, tuple) else v
    return out


def merge_sections(base: dict, extra: dict) -> dict:
    unknown = set(extra) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(sorted(unknown))}")
    merged = {k: dict(v) for k, v in base.items()}
    for section, values in extra.items():
        if not isinstance(values, dict):
            raise ValueError(f"[{section}] must be a table")
        merged.setdefault(section, {}).update(values)
    return merged


def build_config(preset: str = "desk", sections: dict | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ValueError(f"preset: {preset!r} not in {PRESETS}")
    merged = merge_sections(_DESK if preset == "desk" else _PAPER, sections or {})
    parts = {name: cls(**_coerce(cls, name, merged.get(name, {}))) for name, cls in SECTIONS.items()}
    cfg = RunConfig(preset=preset, **parts)
    cfg.validate()
    return cfg


def read_toml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    preset = data.pop("preset", None)
    if preset is not None:
        data["_preset"] = preset
    return data


def load_config(path=None, preset: str | None = None) -> RunConfig:
    """Preset defaults, then file values; an explicit ``preset`` argument wins over the file's."""
    data = read_toml(path) if path is not None else {}
    file_preset = data.pop("_preset", None)
    return build_config(preset or file_preset or "desk", data)
