"""Build an experiment from its config, run it, and persist the results."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

from .cluster import WorkerSpec, heterogeneity_level
from .config import ExperimentConfig
from .coordination import AspSimulator, BspTrainer, step_lr
from .events import EventLog
from .memory import MemoryProfile, max_safe_batch, measure_batch_memory
from .metrics import (
    RunMetrics,
    iteration_density,
    quartiles,
    staleness_histogram,
    time_to_accuracy,
    write_run,
)
from .numeric_core import build_model, generate_dataset

log = logging.getLogger(__name__)

MEMORY_FILE = "memory.csv"
MEMORY_PROBE_BATCHES = (1, 32, 64, 128, 512, 1024)


@dataclass
class Execution:
    config: ExperimentConfig
    metrics: RunMetrics
    engine: Union[BspTrainer, AspSimulator]
    events: EventLog


def memory_profile(model, feature_dim: int) -> MemoryProfile:
    """Memory profile of ``model`` with batch costs taken from the simulator's own arrays."""
    samples = measure_batch_memory(model, feature_dim, MEMORY_PROBE_BATCHES)
    (b0, m0), (b1, m1) = samples[0], samples[-1]
    slope = (m1 - m0) / (b1 - b0)
    return MemoryProfile.for_model(model.num_params, 8, "sgd", batch_slope=slope,
                                   batch_intercept=m0 - slope * b0)


def build(cfg: ExperimentConfig, events: Optional[EventLog] = None):
    data = generate_dataset(cfg.dataset)
    train, held = data.split(cfg.holdout, cfg.dataset.seed)
    model = build_model(cfg.model.kind, cfg.dataset.feature_dim, cfg.dataset.num_classes, cfg.model.hidden)
    cl = cfg.cluster
    caps = cl.base_capacities()
    workers = [WorkerSpec(i, c, a=cl.a, c=cl.c, noise_cv=cl.noise_cv, gamma=cl.gamma,
                          memory_budget=cl.memory_budget) for i, c in enumerate(caps)]
    controller = cfg.controller
    if cl.memory_budget is not None:
        cap = max_safe_batch(memory_profile(model, cfg.dataset.feature_dim), cl.memory_budget,
                             hard_cap=controller.b_max)
        controller = replace(controller, worker_b_max={w.worker_id: cap for w in workers})
    if cfg.mode == "asp":
        controller = replace(controller, constraint_enabled=False)
    events = events if events is not None else EventLog()
    lr = step_lr(cfg.lr.base, cfg.lr.decay_epochs, cfg.lr.factor)
    common = dict(params=model.init_params(cfg.seed), events=events, eval_data=held,
                  initial_plan=cfg.initial_plan)
    schedule = cl.build_schedule()
    if cfg.mode == "bsp":
        engine = BspTrainer(model, train, workers, schedule, controller, cfg.policy, lr, cfg.seed,
                            iterations_per_epoch=cfg.iterations_per_epoch, sync_cost=cfg.sync_cost,
                            threads=cfg.threads, **common)
    else:
        engine = AspSimulator(model, train, workers, schedule, controller, cfg.policy, lr, cfg.seed, **common)
    return engine, events


def execute(cfg: ExperimentConfig) -> Execution:
    """Run ``cfg`` in memory and return metrics together with the engine."""
    engine, events = build(cfg)
    events.emit("start", mode=cfg.mode, policy=cfg.policy, seed=cfg.seed,
                batches=list(engine.plan.as_tuple()), hl=heterogeneity_level(engine.capacities(0)))
    summary = {"config": cfg.to_dict(), "mode": cfg.mode, "policy": cfg.policy}
    if cfg.mode == "bsp":
        try:
            epochs = [engine.run_epoch(e) for e in range(cfg.epochs)]
        finally:
            engine.close()
        times = [r["compute_time"] for r in events.of_kind("round")]
        summary["compute_time_quartiles"] = quartiles(times)
        summary["mean_round_time"] = sum(st.mean_round_time for st in epochs) / len(epochs)
        summary["final_round_time"] = epochs[-1].mean_round_time
    else:
        epochs = engine.run(total_iterations=cfg.total_iterations,
                            max_epochs=None if cfg.total_iterations else cfg.epochs)
        entries = engine.ps.update_log
        dens = iteration_density(entries, engine.ids)
        summary["update_counts"] = {str(k): v for k, v in dens.counts.items()}
        summary["update_shares"] = {str(k): v for k, v in dens.shares.items()}
        summary["update_skew"] = dens.skew
        last_change = engine.plan_changes[-1] if engine.plan_changes else 0
        settled = [e for e in entries if e.version_written > last_change]
        summary["settled_updates"] = len(settled)
        summary["settled_update_skew"] = iteration_density(settled, engine.ids).skew if settled else None
        summary["staleness_histogram"] = {str(k): v for k, v in
                                          staleness_histogram(e.staleness for e in entries).items()}
        summary["mean_staleness"] = sum(e.staleness for e in entries) / len(entries)
        summary["total_updates"] = len(entries)
    last = epochs[-1]
    summary.update(
        epochs_run=len(epochs),
        sim_time=last.sim_time,
        final_loss=last.loss,
        final_train_acc=last.train_acc,
        final_eval_acc=last.eval_acc,
        final_batches=list(engine.plan.as_tuple()),
        target_accuracy=cfg.target_accuracy,
        tta=time_to_accuracy(epochs, cfg.target_accuracy),
        saturated_epochs=[st.epoch for st in epochs if st.saturated],
        dropped_samples=sum(s.dropped for s in engine.tracker.states.values()),
        time_unit="simulated seconds",
    )
    events.emit("end", sim_time=last.sim_time, epochs=len(epochs))
    return Execution(cfg, RunMetrics(epochs, summary), engine, events)


def write_memory_samples(cfg: ExperimentConfig, path) -> None:
    model = build_model(cfg.model.kind, cfg.dataset.feature_dim, cfg.dataset.num_classes, cfg.model.hidden)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_size", "bytes"])
        w.writerows(measure_batch_memory(model, cfg.dataset.feature_dim, MEMORY_PROBE_BATCHES))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunMetrics:
    """Run ``cfg`` and write metrics.csv, events.log, summary.json and memory.csv."""
    ex = execute(cfg)
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    write_run(ex.metrics, out, ex.events)
    write_memory_samples(cfg, out / MEMORY_FILE)
    return ex.metrics
