"""Batch-size decision logic.

Static capacity-proportional allocation, EWMA smoothing of per-worker compute
times, and the proportional controller with dead-band, min/max bounds and the
fixed-global-batch redistribution rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Tuple

from .errors import (
    ConfigError,
    ConstraintInfeasibleError,
    InfeasibleAllocationError,
    MeasurementError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerConfig:
    b_min: int = 4
    b_max: int = 96
    deadband: float = 0.0
    ewma_alpha: float = 0.5
    adjust_every_epochs: int = 1
    # finer cadence for synchronous runs; overrides the epoch cadence when set
    adjust_every_iterations: Optional[int] = None
    global_batch: int = 128
    constraint_enabled: bool = True
    # "uniform" subtracts the surplus evenly (as printed); "proportional"
    # rescales the candidates toward the target total instead.
    redistribution: str = "uniform"
    # per-worker caps tighter than b_max, e.g. from a memory budget
    worker_b_max: Optional[Mapping[int, int]] = None

    def __post_init__(self):
        if self.redistribution not in ("uniform", "proportional"):
            raise ConfigError(f"redistribution must be uniform or proportional, got {self.redistribution!r}")
        if not 1 <= self.b_min <= self.b_max:
            raise ConfigError(f"need 1 <= b_min <= b_max, got ({self.b_min}, {self.b_max})")
        # 0 is allowed: it disables the dead-band entirely.
        if not 0.0 <= self.deadband < 1.0:
            raise ConfigError(f"deadband must lie in [0, 1), got {self.deadband}")
        if not 0.0 < self.ewma_alpha <= 1.0:
            raise ConfigError(f"ewma_alpha must lie in (0, 1], got {self.ewma_alpha}")
        if self.adjust_every_epochs < 1:
            raise ConfigError("adjust_every_epochs must be >= 1")
        if self.adjust_every_iterations is not None and self.adjust_every_iterations < 1:
            raise ConfigError("adjust_every_iterations must be >= 1")
        if self.global_batch < 1:
            raise ConfigError("global_batch must be >= 1")
        if self.worker_b_max and any(v < self.b_min for v in self.worker_b_max.values()):
            raise ConfigError(f"per-worker caps below b_min={self.b_min}: {dict(self.worker_b_max)}")

    def upper(self, worker_id: int) -> int:
        if self.worker_b_max and worker_id in self.worker_b_max:
            return min(self.b_max, int(self.worker_b_max[worker_id]))
        return self.b_max


@dataclass(frozen=True)
class BatchPlan:
    """Per-worker batch sizes plus the global-batch constraint state."""

    per_worker: Dict[int, int]
    global_target: int
    constraint_enabled: bool = True

    @property
    def total(self) -> int:
        return sum(self.per_worker.values())

    @property
    def worker_ids(self) -> List[int]:
        return sorted(self.per_worker)

    def __getitem__(self, worker_id: int) -> int:
        return self.per_worker[worker_id]

    def as_tuple(self) -> Tuple[int, ...]:
        return tuple(self.per_worker[w] for w in self.worker_ids)

    def lr_scale(self, worker_id: int) -> float:
        """Linear LR scaling factor b_k / sum(b) used by asynchronous workers."""
        return self.per_worker[worker_id] / self.total

    @classmethod
    def uniform(cls, worker_ids, batch_size: int, constraint_enabled: bool = True) -> "BatchPlan":
        ids = list(worker_ids)
        return cls({w: int(batch_size) for w in ids}, int(batch_size) * len(ids), constraint_enabled)


@dataclass(frozen=True)
class WorkerTimingState:
    worker_id: int
    smoothed: float = 0.0
    sample_count: int = 0
    last_raw_time: float = 0.0
    dropped: int = 0


@dataclass(frozen=True)
class AdjustmentRecord:
    worker_id: int
    old_b: int
    new_b: int
    smoothed_time: float
    error: float
    clamped: bool
    epoch: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "kind": "adjust",
            "epoch": self.epoch,
            "worker_id": self.worker_id,
            "old_b": self.old_b,
            "new_b": self.new_b,
            "t_bar": self.smoothed_time,
            "tau": self.error,
            "clamped": self.clamped,
        }


def _largest_remainder(weights: Mapping[int, float], total: int) -> Dict[int, int]:
    ids = sorted(weights)
    # exact rationals so that genuine ties are not broken by float error
    fr = {w: Fraction(weights[w]) for w in ids}
    wsum = sum(fr.values())
    exact = {w: fr[w] * total / wsum for w in ids}
    alloc = {w: math.floor(exact[w]) for w in ids}
    short = total - sum(alloc.values())
    # biggest fractional part first; ties go to the lower worker id
    order = sorted(ids, key=lambda w: (-(exact[w] - alloc[w]), w))
    for w in order[:short]:
        alloc[w] += 1
    return alloc


def variable_batch_allocation(capacities: Mapping[int, float], global_batch: int) -> BatchPlan:
    """Split ``global_batch`` across workers in proportion to capacity.

    Integer sizes come from largest-remainder rounding, so they always sum to
    ``global_batch``. Every worker gets at least one sample.

    >>> variable_batch_allocation({0: 6, 1: 6, 2: 4, 3: 32}, 128).as_tuple()
    (16, 16, 11, 85)
    """
    if not capacities:
        raise InfeasibleAllocationError("no workers to allocate to")
    if any(c <= 0 for c in capacities.values()):
        raise InfeasibleAllocationError(f"capacities must be positive: {dict(capacities)}")
    if global_batch < len(capacities):
        raise InfeasibleAllocationError(
            f"global batch {global_batch} smaller than worker count {len(capacities)}"
        )
    alloc = _largest_remainder(capacities, int(global_batch))
    for w in sorted(alloc):
        if alloc[w] == 0:
            donor = max(sorted(alloc), key=lambda v: alloc[v])
            alloc[donor] -= 1
            alloc[w] = 1
    return BatchPlan(alloc, int(global_batch), True)


def controller_fixed_point(capacities: Mapping[int, float], global_batch: int,
                           config: Optional[ControllerConfig] = None) -> BatchPlan:
    """Analytic equilibrium of the controller under t_k = b_k / cap_k.

    Equal compute times need b_k proportional to cap_k, which is exactly the
    static allocation (same rounding).
    """
    plan = variable_batch_allocation(capacities, global_batch)
    if config is not None:
        plan = replace(plan, constraint_enabled=config.constraint_enabled)
    return plan


def record_compute_time(state: WorkerTimingState, raw_time: float, alpha: float) -> WorkerTimingState:
    """Fold one raw compute time into the worker's EWMA.

    The first sample initialises the average; later ones use
    ``alpha * raw + (1 - alpha) * old``.
    """
    if not raw_time > 0 or not math.isfinite(raw_time):
        raise MeasurementError(f"worker {state.worker_id}: non-positive compute time {raw_time!r}")
    if state.sample_count == 0:
        smoothed = float(raw_time)
    else:
        smoothed = alpha * raw_time + (1.0 - alpha) * state.smoothed
    return replace(state, smoothed=smoothed, sample_count=state.sample_count + 1,
                   last_raw_time=float(raw_time))


class TimingTracker:
    """Per-worker EWMA states. Invalid samples are dropped and counted."""

    def __init__(self, worker_ids, alpha: float):
        self.alpha = alpha
        self.states = {w: WorkerTimingState(w) for w in worker_ids}

    def record(self, worker_id: int, raw_time: float) -> WorkerTimingState:
        state = self.states[worker_id]
        try:
            state = record_compute_time(state, raw_time, self.alpha)
        except MeasurementError as exc:
            log.warning("%s; sample dropped", exc)
            state = replace(state, dropped=state.dropped + 1)
        self.states[worker_id] = state
        return state

    def reset(self, worker_id: int) -> None:
        old = self.states[worker_id]
        self.states[worker_id] = WorkerTimingState(worker_id, dropped=old.dropped)

    def smoothed(self) -> Dict[int, float]:
        return {w: s.smoothed for w, s in self.states.items()}

    def ready(self) -> bool:
        return all(s.sample_count > 0 for s in self.states.values())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clamp(b: int, config: ControllerConfig, worker_id: int) -> int:
    return min(max(b, config.b_min), config.upper(worker_id))


def _spread_residual(batches: Dict[int, int], residual: int, candidates: List[int]) -> None:
    """Subtract ``residual`` evenly over ``candidates``; leftover units go in id order."""
    n = len(candidates)
    q, r = divmod(abs(residual), n)
    sign = 1 if residual > 0 else -1
    for i, w in enumerate(sorted(candidates)):
        batches[w] -= sign * (q + (1 if i < r else 0))


def _enforce_global_batch(batches: Dict[int, int], target: int, config: ControllerConfig,
                          clamped: Dict[int, bool]) -> int:
    """Pull the plan total back to ``target`` without leaving the bound box.

    First pass subtracts the residual uniformly from every worker, then
    re-clamps; whatever clamping gives back is spread over workers that still
    have slack, until the residual is gone or nobody can absorb it. Returns the
    residual left over (0 on success).
    """
    residual = sum(batches.values()) - target
    if residual == 0:
        return 0
    if config.redistribution == "proportional":
        batches.update(_largest_remainder(dict(batches), target))
    else:
        # remainder units prefer workers the controller did not clamp
        first = sorted(batches, key=lambda w: (clamped[w], w))
        q, r = divmod(abs(residual), len(first))
        sign = 1 if residual > 0 else -1
        for w in batches:
            batches[w] -= sign * q
        for w in first[:r]:
            batches[w] -= sign
    while True:
        for w in batches:
            b = _clamp(batches[w], config, w)
            if b != batches[w]:
                clamped[w] = True
            batches[w] = b
        residual = sum(batches.values()) - target
        if residual == 0:
            return 0
        if residual > 0:
            free = [w for w in batches if batches[w] > config.b_min]
        else:
            free = [w for w in batches if batches[w] < config.upper(w)]
        if not free:
            return residual
        _spread_residual(batches, residual, free)


def proportional_adjust(plan: BatchPlan, timings: Mapping[int, float], config: ControllerConfig,
                        epoch: Optional[int] = None) -> Tuple[BatchPlan, List[AdjustmentRecord]]:
    """One proportional-control step over all workers.

    For worker k with batch b and smoothed time t, throughput is b / t and the
    error is t minus the cluster mean; the candidate is b - (b / t) * error,
    rounded. Small relative changes (below ``config.deadband``, measured
    against the candidate) keep the old batch. Results are clamped to
    ``[b_min, b_max]`` and, when the plan carries the global-batch
    constraint, the surplus is redistributed so the total stays fixed.

    Raises ConstraintInfeasibleError (with the best-effort plan attached) if
    the bounds make the target total unreachable.
    """
    ids = plan.worker_ids
    missing = [w for w in ids if w not in timings]
    if missing:
        raise MeasurementError(f"no timing for workers {missing}")
    if any(not timings[w] > 0 for w in ids):
        raise MeasurementError(f"smoothed times must be positive: {dict(timings)}")

    mean_t = math.fsum(timings[w] for w in ids) / len(ids)
    new: Dict[int, int] = {}
    clamped: Dict[int, bool] = {}
    errors: Dict[int, float] = {}
    for w in ids:
        b, t = plan[w], timings[w]
        throughput = b / t
        err = t - mean_t
        errors[w] = err
        cand = max(_round_half_up(b - throughput * err), 1)
        if abs(cand - b) / cand < config.deadband:
            cand = b
        nb = _clamp(cand, config, w)
        clamped[w] = nb != cand
        new[w] = nb

    residual = 0
    if plan.constraint_enabled:
        residual = _enforce_global_batch(new, plan.global_target, config, clamped)

    out = BatchPlan(new, plan.global_target, plan.constraint_enabled)
    records = [
        AdjustmentRecord(w, plan[w], new[w], timings[w], errors[w], clamped[w], epoch) for w in ids
    ]
    if residual:
        raise ConstraintInfeasibleError(
            f"global batch {plan.global_target} unreachable within bounds "
            f"[{config.b_min}, {config.b_max}]; best effort total {out.total}",
            plan=out,
            records=records,
        )
    return out, records
