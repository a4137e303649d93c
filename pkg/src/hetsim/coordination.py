"""Synchronous (BSP) and asynchronous parameter-server (ASP) training loops.

Both run on a virtual clock: worker compute times come from the cluster cost
model, not from the wall clock, so runs are fast and reproducible.
"""

from __future__ import annotations

import heapq
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cluster import HeterogeneitySchedule, WorkerSpec, capacities_at, simulate_compute_time, worker_rng
from .controller import (
    AdjustmentRecord,
    BatchPlan,
    ControllerConfig,
    TimingTracker,
    proportional_adjust,
    variable_batch_allocation,
)
from .errors import ConfigError, ConstraintInfeasibleError, ShapeError
from .events import EventLog
from .numeric_core import (
    Dataset,
    GradientUpdate,
    ParamVector,
    accuracy,
    apply_update,
    compute_gradient,
    loss,
)

log = logging.getLogger(__name__)

POLICIES = ("uniform", "variable", "dynamic", "deadband")


def bsp_aggregate(updates: Sequence[GradientUpdate], global_batch: Optional[int] = None) -> np.ndarray:
    """Weighted sum of worker gradients with weights b_k / sum(b).

    Summation runs in worker-id order so the result does not depend on the
    order workers finished in.
    """
    if not updates:
        raise ShapeError("cannot aggregate an empty update list")
    ups = sorted(updates, key=lambda u: u.worker_id)
    size = ups[0].grad.shape
    if any(u.grad.shape != size for u in ups):
        raise ShapeError("gradient lengths differ across workers")
    total = sum(u.batch_size for u in ups)
    if global_batch is not None and total != global_batch:
        raise ShapeError(f"batch sizes sum to {total}, expected global batch {global_batch}")
    out = np.zeros(size, dtype=np.float64)
    for u in ups:
        out += (u.batch_size / total) * u.grad
    return out


def uniform_plan(worker_ids: Sequence[int], global_batch: int, constraint_enabled: bool = True) -> BatchPlan:
    plan = variable_batch_allocation({w: 1.0 for w in worker_ids}, global_batch)
    return replace(plan, constraint_enabled=constraint_enabled)


def step_lr(base: float, decay_epochs: Sequence[int] = (), factor: float = 0.1) -> Callable[[int], float]:
    """Learning rate multiplied by ``factor`` at each epoch in ``decay_epochs``."""
    marks = sorted(decay_epochs)

    def lr(epoch: int) -> float:
        return base * factor ** sum(1 for m in marks if epoch >= m)

    return lr


@dataclass
class BspRoundResult:
    epoch: int
    iteration: int
    compute_times: Dict[int, float]
    aggregated: np.ndarray
    round_time: float


@dataclass
class EpochStats:
    epoch: int
    sim_time: float
    lr: float
    batches: Tuple[int, ...]
    capacities: Tuple[float, ...]
    mean_compute: Tuple[float, ...]
    t_bar: Tuple[float, ...]
    iterations: int
    loss: float = float("nan")
    train_acc: float = float("nan")
    eval_acc: float = float("nan")
    mean_round_time: float = float("nan")
    saturated: bool = False

    @property
    def spread(self) -> float:
        """(max - min) / mean of the per-worker mean compute times."""
        ts = [t for t in self.mean_compute if t > 0]
        if not ts:
            return float("nan")
        return (max(ts) - min(ts)) / (sum(ts) / len(ts))


class _WorkerSlot:
    def __init__(self, spec: WorkerSpec, seed: int):
        self.spec = spec
        self.data_rng = worker_rng(seed, spec.worker_id, 0)
        self.time_rng = worker_rng(seed, spec.worker_id, 1)


class _Engine:
    """State shared by both coordination modes."""

    def __init__(self, model, data: Dataset, workers: Sequence[WorkerSpec],
                 schedule: Optional[HeterogeneitySchedule], controller: ControllerConfig,
                 policy: str, lr: Callable[[int], float], seed: int,
                 params: Optional[ParamVector] = None, events: Optional[EventLog] = None,
                 eval_data: Optional[Dataset] = None, initial_plan: str = "uniform"):
        if policy not in POLICIES:
            raise ConfigError(f"unknown policy {policy!r}; choose from {POLICIES}")
        if schedule is not None and schedule.num_workers != len(workers):
            raise ConfigError("schedule width does not match the worker count")
        ids = [w.worker_id for w in workers]
        if len(set(ids)) != len(ids):
            raise ConfigError("worker ids must be unique")
        self.model = model
        self.data = data
        self.eval_data = eval_data
        self.schedule = schedule
        self.policy = policy
        if policy == "dynamic":
            controller = replace(controller, deadband=0.0)
        self.config = controller
        self.lr = lr
        self.seed = seed
        self.events = events if events is not None else EventLog()
        self.slots = {w.worker_id: _WorkerSlot(w, seed) for w in sorted(workers, key=lambda s: s.worker_id)}
        self.ids = sorted(self.slots)
        self.params = params if params is not None else model.init_params(seed)
        self.tracker = TimingTracker(self.ids, controller.ewma_alpha)
        self.sim_time = 0.0
        self._caps: Optional[Tuple[float, ...]] = None
        self.plan = self._initial_plan(initial_plan)
        self.adjustments: List[AdjustmentRecord] = []

    @property
    def adaptive(self) -> bool:
        return self.policy in ("dynamic", "deadband")

    def _constraint(self) -> bool:
        return self.config.constraint_enabled

    def _initial_plan(self, how: str) -> BatchPlan:
        caps = self.capacities(0)
        if self.policy == "variable" or how == "variable":
            plan = variable_batch_allocation(dict(zip(self.ids, caps)), self.config.global_batch)
            return replace(plan, constraint_enabled=self._constraint())
        return uniform_plan(self.ids, self.config.global_batch, self._constraint())

    def capacities(self, epoch: int) -> Tuple[float, ...]:
        if self.schedule is None:
            return tuple(self.slots[w].spec.capacity for w in self.ids)
        return capacities_at(self.schedule, epoch)

    def set_capacities(self, epoch: int) -> bool:
        """Apply the schedule for ``epoch``; True when capacities changed."""
        caps = self.capacities(epoch)
        changed = caps != self._caps
        if changed:
            for w, c in zip(self.ids, caps):
                slot = self.slots[w]
                slot.spec = slot.spec.with_capacity(c)
            if self._caps is not None:
                self.events.emit("capacity_change", epoch=epoch, time=self.sim_time, capacities=list(caps))
            self._caps = caps
            if self.policy == "variable":
                self.plan = replace(variable_batch_allocation(dict(zip(self.ids, caps)), self.config.global_batch),
                                    constraint_enabled=self._constraint())
        return changed

    def draw(self, worker_id: int, batch_size: int):
        slot = self.slots[worker_id]
        idx = slot.data_rng.integers(0, len(self.data), size=batch_size)
        return self.data.batch(idx)

    def adjust(self, plan: BatchPlan, timings: Dict[int, float], epoch: int) -> Tuple[BatchPlan, bool]:
        """Run the controller; bound saturation and infeasibility are logged, not raised."""
        infeasible = False
        try:
            new, records = proportional_adjust(plan, timings, self.config, epoch=epoch)
        except ConstraintInfeasibleError as exc:
            new, records, infeasible = exc.plan, exc.records, True
            self.events.emit("constraint_infeasible", epoch=epoch, time=self.sim_time,
                             total=new.total, target=new.global_target, batches=list(new.as_tuple()))
            log.warning("epoch %d: %s", epoch, exc)
        for rec in records:
            self.events.emit(**rec.to_dict(), time=self.sim_time)
        self.adjustments.extend(records)
        saturated = [r.worker_id for r in records if r.clamped]
        if saturated:
            self.events.emit("saturated", epoch=epoch, time=self.sim_time, workers=saturated,
                             b_min=self.config.b_min, b_max=self.config.b_max)
        return new, bool(saturated) or infeasible

    def evaluate(self, stats: EpochStats) -> EpochStats:
        full = self.data.full()
        stats.loss = loss(self.model, self.params, full)
        stats.train_acc = accuracy(self.model, self.params, full)
        if self.eval_data is not None and len(self.eval_data):
            stats.eval_acc = accuracy(self.model, self.params, self.eval_data.full())
        else:
            stats.eval_acc = stats.train_acc
        return stats


class BspTrainer(_Engine):
    """Synchronous data-parallel SGD with per-worker batch sizes.

    Every round each worker draws a mini-batch of its planned size, computes
    a gradient and a simulated compute time; the round lasts as long as the
    slowest worker plus ``sync_cost``. Gradients are combined with
    ``bsp_aggregate`` and applied with one shared learning rate. At the end of
    every ``adjust_every_epochs`` epochs (or every ``adjust_every_iterations``
    rounds, when set) the adaptive policies feed the per-worker smoothed
    times to the controller. Epoch stats report the plan the epoch started with.

    ``threads > 1`` computes worker gradients on a thread pool; results are
    identical to the sequential path because every worker owns its RNGs and
    aggregation order is fixed.
    """

    def __init__(self, *args, iterations_per_epoch: int = 20, sync_cost: float = 0.0,
                 threads: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        if iterations_per_epoch < 1:
            raise ConfigError("iterations_per_epoch must be >= 1")
        self.iterations_per_epoch = iterations_per_epoch
        self.sync_cost = sync_cost
        self.threads = threads
        self._pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        self.trajectory: List[np.ndarray] = []
        self.keep_trajectory = False
        self.rounds_done = 0

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _work(self, worker_id: int, params: ParamVector, batch_size: int):
        batch = self.draw(worker_id, batch_size)
        upd = compute_gradient(self.model, params, batch, worker_id)
        slot = self.slots[worker_id]
        return upd, simulate_compute_time(slot.spec, batch_size, slot.time_rng)

    def run_round(self, epoch: int, iteration: int, lr: float) -> BspRoundResult:
        params, plan = self.params, self.plan
        if self._pool is None:
            results = [self._work(w, params, plan[w]) for w in self.ids]
        else:
            results = list(self._pool.map(lambda w: self._work(w, params, plan[w]), self.ids))
        times = {w: t for w, (_, t) in zip(self.ids, results)}
        for w in self.ids:
            self.tracker.record(w, times[w])
        round_time = max(times.values()) + self.sync_cost
        assert all(round_time >= t for t in times.values())
        agg = bsp_aggregate([u for u, _ in results], plan.total if plan.constraint_enabled else None)
        self.params = apply_update(params, agg, lr)
        if self.keep_trajectory:
            self.trajectory.append(self.params.values.copy())
        self.sim_time += round_time
        for w in self.ids:
            self.events.emit("round", time=self.sim_time, epoch=epoch, iteration=iteration, worker_id=w,
                             batch=plan[w], compute_time=times[w], round_time=round_time)
        return BspRoundResult(epoch, iteration, times, agg, round_time)

    def run_epoch(self, epoch: int) -> EpochStats:
        self.set_capacities(epoch)
        lr = self.lr(epoch)
        plan = self.plan
        sums = {w: 0.0 for w in self.ids}
        round_total = 0.0
        every = self.config.adjust_every_iterations
        saturated = False
        for it in range(self.iterations_per_epoch):
            res = self.run_round(epoch, it, lr)
            round_total += res.round_time
            for w, t in res.compute_times.items():
                sums[w] += t
            self.rounds_done += 1
            if every and self.adaptive and self.rounds_done % every == 0 and self.tracker.ready():
                saturated |= self._replan(epoch)
        n = self.iterations_per_epoch
        stats = EpochStats(
            epoch=epoch, sim_time=self.sim_time, lr=lr, batches=plan.as_tuple(),
            capacities=tuple(self.slots[w].spec.capacity for w in self.ids),
            mean_compute=tuple(sums[w] / n for w in self.ids),
            t_bar=tuple(self.tracker.states[w].smoothed for w in self.ids),
            iterations=n, mean_round_time=round_total / n,
        )
        self.evaluate(stats)
        if (not every and self.adaptive and (epoch + 1) % self.config.adjust_every_epochs == 0
                and self.tracker.ready()):
            saturated |= self._replan(epoch)
        stats.saturated = saturated
        return stats

    def _replan(self, epoch: int) -> bool:
        plan = self.plan
        new, saturated = self.adjust(plan, self.tracker.smoothed(), epoch)
        for w in self.ids:
            if new[w] != plan[w]:
                self.tracker.reset(w)
        self.plan = new
        return saturated


@dataclass(frozen=True)
class UpdateLogEntry:
    worker_id: int
    version_read: int
    version_written: int
    time: float
    batch: int

    @property
    def staleness(self) -> int:
        return self.version_written - self.version_read - 1


@dataclass
class ParameterServerState:
    params: ParamVector
    update_log: List[UpdateLogEntry] = field(default_factory=list)
    wrk_b: Dict[int, int] = field(default_factory=dict)
    wrk_time: Dict[int, float] = field(default_factory=dict)

    def pull(self) -> ParamVector:
        return self.params

    def push(self, local: ParamVector, worker_id: int, version_read: int, time: float, batch: int) -> UpdateLogEntry:
        # whole-model overwrite: last writer wins, nothing is averaged
        version = self.params.version + 1
        self.params = ParamVector(local.values, version)
        entry = UpdateLogEntry(worker_id, version_read, version, time, batch)
        self.update_log.append(entry)
        return entry


@dataclass
class _AspWorker:
    worker_id: int
    batch: int = 0
    pulled: Optional[ParamVector] = None
    update: Optional[GradientUpdate] = None
    lr: float = 0.0
    iters_in_epoch: int = 0
    epochs_done: int = 0
    updates: int = 0


class AspSimulator(_Engine):
    """Asynchronous SGD against a single parameter server.

    Discrete-event simulation ordered by virtual completion time (ties go to
    the lower worker id). A worker pulls the model, computes a gradient on its
    current batch, steps its local copy with ``lr * b_k / sum(b)`` and
    overwrites the server model. After ``ceil(N / (K * b_k))`` of its own
    iterations it reports batch and smoothed time to the server; once all K
    workers have reported, the controller re-plans every worker and the
    reports are discarded.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # the fixed-global-batch rule is synchronous-only
        self.plan = replace(self.plan, constraint_enabled=False)
        self.ps = ParameterServerState(self.params)
        self.plan_changes: List[int] = []
        self.samples = 0
        self._last_epoch_time = 0.0

    def worker_epoch_length(self, batch: int) -> int:
        return math.ceil(len(self.data) / (len(self.ids) * batch))

    def worker_lr(self, worker_id: int, epoch: int) -> float:
        return self.lr(epoch) * self.plan.lr_scale(worker_id)

    def _start(self, w: _AspWorker, epoch: int, heap: list) -> None:
        batch = self.plan[w.worker_id]
        if batch != w.batch and w.batch:
            self.tracker.reset(w.worker_id)
            w.iters_in_epoch = 0
        w.batch = batch
        w.pulled = self.ps.pull()
        w.lr = self.worker_lr(w.worker_id, epoch)
        w.update = compute_gradient(self.model, w.pulled, self.draw(w.worker_id, batch), w.worker_id)
        slot = self.slots[w.worker_id]
        t = simulate_compute_time(slot.spec, batch, slot.time_rng)
        self.tracker.record(w.worker_id, t)
        heapq.heappush(heap, (self.sim_time + t, w.worker_id, t))

    def _eval_bsz(self, w: _AspWorker, epoch: int) -> None:
        self.ps.wrk_b[w.worker_id] = w.batch
        self.ps.wrk_time[w.worker_id] = self.tracker.states[w.worker_id].smoothed
        if len(self.ps.wrk_b) < len(self.ids):
            return
        current = BatchPlan(dict(self.ps.wrk_b), self.plan.global_target, False)
        new, _ = self.adjust(current, dict(self.ps.wrk_time), epoch)
        if new.per_worker != self.plan.per_worker:
            self.plan_changes.append(self.ps.params.version)
        self.plan = new
        self.ps.wrk_b.clear()
        self.ps.wrk_time.clear()

    def run(self, total_iterations: Optional[int] = None, max_epochs: Optional[int] = None,
            on_epoch: Optional[Callable[[EpochStats], None]] = None) -> List[EpochStats]:
        """Simulate server updates until either budget runs out; returns per-epoch stats.

        A (global) epoch is one pass worth of samples, ``len(data)``, summed
        over all workers' updates.
        """
        if total_iterations is None and max_epochs is None:
            raise ConfigError("give total_iterations or max_epochs")
        if total_iterations is not None and total_iterations < len(self.ids):
            raise ConfigError("total_iterations must be at least the worker count")
        limit = total_iterations if total_iterations is not None else math.inf
        epoch_limit = max_epochs if max_epochs is not None else math.inf
        n = len(self.data)
        epoch = 0
        self.set_capacities(0)
        workers = {w: _AspWorker(w) for w in self.ids}
        heap: list = []
        for w in self.ids:
            self._start(workers[w], epoch, heap)
        stats: List[EpochStats] = []
        ep_sums = {w: [0.0, 0] for w in self.ids}
        ep_start_updates = 0
        while len(self.ps.update_log) < limit and epoch < epoch_limit:
            finish, wid, t = heapq.heappop(heap)
            self.sim_time = finish
            w = workers[wid]
            local = apply_update(w.pulled, w.update.grad, w.lr)
            entry = self.ps.push(local, wid, w.pulled.version, finish, w.batch)
            w.updates += 1
            w.iters_in_epoch += 1
            ep_sums[wid][0] += t
            ep_sums[wid][1] += 1
            self.samples += w.batch
            self.events.emit("update", time=finish, epoch=epoch, iteration=entry.version_written, worker_id=wid,
                             batch=w.batch, compute_time=t, staleness=entry.staleness)
            if w.iters_in_epoch >= self.worker_epoch_length(w.batch):
                w.iters_in_epoch = 0
                w.epochs_done += 1
                if self.adaptive and w.epochs_done % self.config.adjust_every_epochs == 0:
                    self._eval_bsz(w, epoch)
            while self.samples >= (epoch + 1) * n:
                st = self._epoch_stats(epoch, ep_sums, len(self.ps.update_log) - ep_start_updates)
                stats.append(st)
                if on_epoch:
                    on_epoch(st)
                epoch += 1
                ep_start_updates = len(self.ps.update_log)
                ep_sums = {v: [0.0, 0] for v in self.ids}
                self.set_capacities(epoch)
            if len(self.ps.update_log) < limit and epoch < epoch_limit:
                self._start(w, epoch, heap)
        if len(self.ps.update_log) > ep_start_updates and epoch < epoch_limit:
            st = self._epoch_stats(epoch, ep_sums, len(self.ps.update_log) - ep_start_updates)
            stats.append(st)
            if on_epoch:
                on_epoch(st)
        self.params = self.ps.params
        return stats

    def _epoch_stats(self, epoch: int, sums, updates: int) -> EpochStats:
        self.params = self.ps.params
        st = EpochStats(
            epoch=epoch, sim_time=self.sim_time, lr=self.lr(epoch), batches=self.plan.as_tuple(),
            capacities=tuple(self.slots[w].spec.capacity for w in self.ids),
            mean_compute=tuple((sums[w][0] / sums[w][1]) if sums[w][1] else 0.0 for w in self.ids),
            t_bar=tuple(self.tracker.states[w].smoothed for w in self.ids),
            iterations=updates,
        )
        st.mean_round_time = (self.sim_time - self._last_epoch_time) / updates if updates else 0.0
        self._last_epoch_time = self.sim_time
        return self.evaluate(st)


def staleness_of(update_log: Sequence[UpdateLogEntry]) -> List[int]:
    return [e.staleness for e in update_log]
