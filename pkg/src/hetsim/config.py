"""Experiment configuration: YAML (or JSON) file -> validated ``ExperimentConfig``.

Schema (all keys optional except where noted; defaults shown)::

    mode: bsp                  # bsp | asp
    policy: uniform            # uniform | variable | dynamic | deadband
    seed: 0                    # required, no wall-clock default
    epochs: 10
    iterations_per_epoch: 20   # bsp rounds per epoch
    total_iterations: null     # asp: server updates; null = run ``epochs`` passes
    target_accuracy: 0.9       # for time-to-accuracy
    holdout: 0.1               # held-out fraction for eval accuracy
    sync_cost: 0.0             # simulated seconds added to every bsp round
    threads: 1                 # >1 computes bsp worker gradients concurrently
    initial_plan: uniform      # uniform | variable (starting batches for dynamic policies)
    output_dir: runs/default
    dataset: {num_classes: 3, feature_dim: 8, samples_per_class: 300, cluster_spread: 1.0, seed: 0}
    model: {kind: softmax, hidden: 16}
    lr: {base: 0.1, decay_epochs: [], factor: 0.1}
    controller: {b_min: 4, b_max: 96, deadband: 0.1, ewma_alpha: 0.5, global_batch: 128,
                 constraint_enabled: true, adjust_every_epochs: 1, adjust_every_iterations: null,
                 redistribution: uniform}
    cluster:
      preset: HL1-bsp          # or ``capacities: [..]``
      a: 1.0                   # seconds per sample per capacity unit
      c: 0.0                   # fixed seconds per iteration
      gamma: 1.0
      noise_cv: 0.0
      memory_budget: null      # bytes per worker; caps b_max through the memory model
      schedule:                # optional stepwise capacities
        - {epoch: 0, capacities: HL1-bsp}
        - {epoch: 5, capacities: [12, 12, 8, 16]}
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from .cluster import PRESETS, HeterogeneitySchedule, preset_capacities
from .controller import ControllerConfig
from .errors import ConfigError
from .numeric_core import DatasetSpec

MODES = ("bsp", "asp")
POLICIES = ("uniform", "variable", "dynamic", "deadband")
DEFAULT_DEADBAND = 0.1


@dataclass
class ModelSpec:
    kind: str = "softmax"
    hidden: int = 16


@dataclass
class LrSpec:
    base: float = 0.1
    decay_epochs: List[int] = field(default_factory=list)
    factor: float = 0.1


@dataclass
class ClusterSpec:
    preset: Optional[str] = "HL1-bsp"
    capacities: Optional[List[float]] = None
    a: float = 1.0
    c: float = 0.0
    gamma: float = 1.0
    noise_cv: float = 0.0
    memory_budget: Optional[float] = None
    schedule: Optional[List[Dict[str, Any]]] = None

    def base_capacities(self) -> List[float]:
        if self.capacities is not None:
            return [float(c) for c in self.capacities]
        return [float(c) for c in preset_capacities(self.preset)]

    def build_schedule(self) -> HeterogeneitySchedule:
        if self.schedule:
            return HeterogeneitySchedule.from_list(self.schedule)
        return HeterogeneitySchedule.static(self.base_capacities())


@dataclass
class ExperimentConfig:
    seed: int
    mode: str = "bsp"
    policy: str = "uniform"
    epochs: int = 10
    iterations_per_epoch: int = 20
    total_iterations: Optional[int] = None
    target_accuracy: float = 0.9
    holdout: float = 0.1
    sync_cost: float = 0.0
    threads: int = 1
    initial_plan: str = "uniform"
    output_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    lr: LrSpec = field(default_factory=LrSpec)
    controller: ControllerConfig = field(default_factory=lambda: ControllerConfig(deadband=DEFAULT_DEADBAND))
    cluster: ClusterSpec = field(default_factory=ClusterSpec)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["controller"].pop("worker_b_max", None)
        return d

    def validate(self) -> "ExperimentConfig":
        _check(self.mode in MODES, "mode", f"must be one of {MODES}, got {self.mode!r}")
        _check(self.policy in POLICIES, "policy", f"must be one of {POLICIES}, got {self.policy!r}")
        _check(self.initial_plan in ("uniform", "variable"), "initial_plan", "must be uniform or variable")
        _check(self.epochs >= 1, "epochs", "must be >= 1")
        _check(self.iterations_per_epoch >= 1, "iterations_per_epoch", "must be >= 1")
        _check(self.total_iterations is None or self.total_iterations >= 1, "total_iterations", "must be >= 1")
        _check(0.0 < self.holdout < 1.0, "holdout", "must lie in (0, 1)")
        _check(self.sync_cost >= 0, "sync_cost", "must be >= 0")
        _check(self.threads >= 1, "threads", "must be >= 1")
        _check(self.model.kind in ("softmax", "mlp"), "model.kind", "must be softmax or mlp")
        _check(self.lr.base > 0, "lr.base", "must be > 0")
        cl = self.cluster
        if cl.capacities is None and cl.preset not in PRESETS:
            raise ConfigError(f"cluster.preset: unknown preset {cl.preset!r}; choose from {sorted(PRESETS)}")
        try:
            sched = cl.build_schedule()
        except ConfigError as exc:
            raise ConfigError(f"cluster.schedule: {exc}") from None
        _check(sched.num_workers == len(cl.base_capacities()), "cluster.schedule",
               "capacity vectors must match the worker count")
        _check(self.controller.global_batch >= sched.num_workers, "controller.global_batch",
               "must be at least the worker count")
        return self


def _check(ok: bool, name: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {msg}")


_SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "lr": LrSpec,
    "controller": ControllerConfig,
    "cluster": ClusterSpec,
}


def _build(section: str, cls, raw) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(raw).__name__}")
    known = set(cls.__dataclass_fields__)
    if cls is ControllerConfig:
        raw = {"deadband": DEFAULT_DEADBAND, **raw}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    if "seed" not in raw:
        raise ConfigError("seed: required (no wall-clock default)")
    top = set(ExperimentConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    if raw.get("policy") == "dynamic+deadband":
        raw["policy"] = "deadband"
    for name, cls in _SECTIONS.items():
        raw[name] = _build(name, cls, raw.get(name))
    return ExperimentConfig(**raw).validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(raw or {})


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Field-by-field overrides from CLI flags; ``None`` means keep."""
    raw = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "preset":
            raw["cluster"]["preset"] = value
            raw["cluster"]["capacities"] = None
        else:
            raw[key] = value
    return config_from_dict(raw)
