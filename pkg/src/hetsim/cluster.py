"""Simulated heterogeneous workers: cost model, heterogeneity schedules, HL metric."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

# CPU-core allocations across the 4-node cluster; every row totals 48 cores
# for BSP. The ASP HL8 row only reaches 28/4 = 7.0.
PRESETS: Dict[str, Tuple[int, ...]] = {
    "HL1-bsp": (12, 12, 12, 12),
    "HL2-bsp": (12, 12, 8, 16),
    "HL4-bsp": (9, 9, 6, 24),
    "HL8-bsp": (6, 6, 4, 32),
    "HL1-asp": (10, 10, 10, 10),
    "HL2-asp": (8, 8, 8, 16),
    "HL4-asp": (10, 10, 4, 16),
    "HL8-asp": (4, 4, 4, 28),
}


def preset_capacities(name: str) -> Tuple[int, ...]:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def heterogeneity_level(capacities: Sequence[float]) -> float:
    """Largest capacity over smallest capacity.

    >>> heterogeneity_level((6, 6, 4, 32))
    8.0
    """
    caps = list(capacities)
    if not caps:
        raise ConfigError("heterogeneity level of an empty cluster")
    if any(c <= 0 for c in caps):
        raise ConfigError(f"capacities must be positive: {caps}")
    return max(caps) / min(caps)


@dataclass(frozen=True)
class WorkerSpec:
    """One simulated worker.

    Compute time for a batch of ``b`` samples is
    ``(a * b / capacity**gamma + c) * (1 + eps)`` with eps drawn from a
    normal of standard deviation ``noise_cv``, truncated at three sigma.
    ``gamma < 1`` models imperfect intra-node parallelism.
    """

    worker_id: int
    capacity: float
    a: float = 1.0
    c: float = 0.0
    noise_cv: float = 0.0
    memory_budget: Optional[float] = None
    gamma: float = 1.0

    def __post_init__(self):
        if self.capacity <= 0:
            raise ConfigError(f"worker {self.worker_id}: capacity must be > 0")
        if self.a <= 0:
            raise ConfigError(f"worker {self.worker_id}: cost slope a must be > 0")
        if self.c < 0 or self.noise_cv < 0:
            raise ConfigError(f"worker {self.worker_id}: c and noise_cv must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"worker {self.worker_id}: gamma must lie in (0, 1]")

    def with_capacity(self, capacity: float) -> "WorkerSpec":
        return replace(self, capacity=capacity)


def _truncated_normal(rng: np.random.Generator, sigma: float) -> float:
    while True:
        eps = rng.normal(0.0, sigma)
        if abs(eps) <= 3.0 * sigma:
            return float(eps)


def simulate_compute_time(spec: WorkerSpec, batch_size: int, rng: Optional[np.random.Generator] = None) -> float:
    """Virtual seconds ``spec`` needs for one gradient over ``batch_size`` samples."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    base = spec.a * batch_size / spec.capacity ** spec.gamma + spec.c
    if spec.noise_cv == 0:
        return base
    if rng is None:
        raise ConfigError("noisy compute time needs an rng")
    return base * (1.0 + _truncated_normal(rng, spec.noise_cv))


@dataclass(frozen=True)
class HeterogeneitySchedule:
    """Piecewise-constant map from epoch to per-worker capacities."""

    entries: Tuple[Tuple[int, Tuple[float, ...]], ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("schedule needs at least one entry")
        starts = [e for e, _ in self.entries]
        if starts[0] != 0:
            raise ConfigError("first schedule entry must start at epoch 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"schedule start epochs must strictly increase: {starts}")
        widths = {len(c) for _, c in self.entries}
        if len(widths) != 1:
            raise ConfigError("all schedule capacity vectors must have the same length")
        for _, caps in self.entries:
            heterogeneity_level(caps)

    @classmethod
    def static(cls, capacities: Sequence[float]) -> "HeterogeneitySchedule":
        return cls(((0, tuple(capacities)),))

    @classmethod
    def from_list(cls, items) -> "HeterogeneitySchedule":
        """Build from ``[{"epoch": 0, "capacities": [...]}, ...]`` or preset names."""
        entries = []
        for item in items:
            caps = item["capacities"]
            if isinstance(caps, str):
                caps = preset_capacities(caps)
            entries.append((int(item["epoch"]), tuple(float(c) for c in caps)))
        return cls(tuple(entries))

    @classmethod
    def stepwise(cls, presets: Sequence[str], every: int) -> "HeterogeneitySchedule":
        """Switch between named presets every ``every`` epochs."""
        return cls(tuple((i * every, tuple(float(c) for c in preset_capacities(p)))
                         for i, p in enumerate(presets)))

    @property
    def num_workers(self) -> int:
        return len(self.entries[0][1])

    @property
    def switch_epochs(self) -> List[int]:
        return [e for e, _ in self.entries[1:]]

    def to_list(self) -> List[dict]:
        return [{"epoch": e, "capacities": list(c)} for e, c in self.entries]


def capacities_at(schedule: HeterogeneitySchedule, epoch: int) -> Tuple[float, ...]:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    current = schedule.entries[0][1]
    for start, caps in schedule.entries:
        if start > epoch:
            break
        current = caps
    return current


def hl_sweep_schedule(every: int = 5, flavour: str = "bsp") -> HeterogeneitySchedule:
    """HL1 -> HL2 -> HL4 -> HL8 -> HL4 -> HL2 -> HL1, one step every ``every`` epochs."""
    order = ["HL1", "HL2", "HL4", "HL8", "HL4", "HL2", "HL1"]
    return HeterogeneitySchedule.stepwise([f"{hl}-{flavour}" for hl in order], every)


def worker_rng(master_seed: int, worker_id: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (worker, stream); base seed is master_seed XOR worker_id."""
    seq = np.random.SeedSequence([int(master_seed) ^ int(worker_id), stream])
    return np.random.default_rng(seq)
