"""Experiment configuration: nested dataclasses, JSON files, dotted overrides and a content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .denoisers import TrainConfig
from .multimodal import MODES
from .sampler import SamplerConfig

FLOW_KINDS = ("masking", "uniform")
DENOISER_KINDS = ("exact", "mlp", "mixture", "joint_mlp")
METRICS = ("tv", "entropy", "jumps", "elbo", "label_freq")


@dataclass
class DataSpec:
    """Either a named synthetic family with parameters or a path to a saved dataset."""

    family: Optional[str] = None
    params: dict = field(default_factory=dict)
    path: Optional[str] = None

    def __post_init__(self):
        if (self.family is None) == (self.path is None):
            raise ValueError("data needs exactly one of 'family' or 'path'")


@dataclass
class DenoiserSpec:
    kind: str = "exact"
    hidden: int = 64
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in DENOISER_KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}; choose from {DENOISER_KINDS}")


@dataclass
class EvalSpec:
    metrics: list = field(default_factory=lambda: ["tv", "entropy", "jumps"])
    mc_samples: int = 10_000
    n: int = 10_000  # samples drawn per sweep cell
    sweep_eta: list = field(default_factory=lambda: [0.0])
    sweep_temperature: list = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")


@dataclass
class ExperimentConfig:
    flow: str = "masking"
    S: int = 4
    D: int = 3
    data: DataSpec = field(default_factory=lambda: DataSpec(family="iid_uniform"))
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    mode: str = "cogenerate"
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.flow not in FLOW_KINDS:
            raise ValueError(f"unknown flow {self.flow!r}; choose from {FLOW_KINDS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.S < 1 or self.D < 1:
            raise ValueError("S and D must be positive")
        if self.data.path is not None and not Path(self.data.path).exists():
            raise FileNotFoundError(f"data file {self.data.path} does not exist")
        if self.denoiser.checkpoint is not None and not Path(self.denoiser.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint {self.denoiser.checkpoint} does not exist")

    @property
    def is_joint(self) -> bool:
        return self.data.family == "gaussian_mixture_labeled" or self.denoiser.kind in ("mixture", "joint_mlp")

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


_NESTED = {"data": DataSpec, "denoiser": DenoiserSpec, "train": TrainConfig, "sampler": SamplerConfig,
           "eval": EvalSpec}


def from_dict(obj: dict) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    kwargs = dict(obj)
    for key, cls in _NESTED.items():
        if key in kwargs:
            sub = kwargs[key]
            names = {f.name for f in dataclasses.fields(cls)}
            bad = set(sub) - names
            if bad:
                raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
            kwargs[key] = cls(**sub)
    return ExperimentConfig(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(base: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings to a nested dict; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(base))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"cannot set {key!r}: {p!r} is not a section")
        node[leaf] = _parse_value(raw)
    return out


def load_config(path: Optional[str] = None, overrides=()) -> ExperimentConfig:
    """Read a JSON file (or start from defaults), apply overrides, and propagate the top-level seed.

    The top-level ``seed`` seeds sampling and training unless those sections set
    their own seed explicitly.
    """
    base = json.loads(Path(path).read_text()) if path else {}
    merged = apply_overrides(base, overrides)
    seed = merged.get("seed", 0)
    for section in ("sampler", "train"):
        merged.setdefault(section, {}).setdefault("seed", seed)
    return from_dict(merged)

