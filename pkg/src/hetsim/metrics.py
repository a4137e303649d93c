"""Run metrics, file round-tripping, iteration density, TTA and run comparison."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .coordination import EpochStats
from .errors import ConfigError

METRICS_FILE = "metrics.csv"
EVENTS_FILE = "events.log"
SUMMARY_FILE = "summary.json"

# fixed leading columns of metrics.csv; per-worker blocks follow in this order:
# b_<k>, t_bar_<k>, compute_<k>, cap_<k> for k = 0..K-1
SCALAR_COLUMNS = [
    "epoch", "sim_time", "lr", "loss", "train_acc", "eval_acc",
    "mean_round_time", "spread", "saturated", "iterations",
]
WORKER_BLOCKS = [("b", "batches", int), ("t_bar", "t_bar", float),
                 ("compute", "mean_compute", float), ("cap", "capacities", float)]


@dataclass
class RunMetrics:
    epochs: List[EpochStats]
    summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_workers(self) -> int:
        return len(self.epochs[0].batches) if self.epochs else 0

    @property
    def tta(self) -> Optional[float]:
        return self.summary.get("tta")

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].eval_acc


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_header(num_workers: int) -> List[str]:
    cols = list(SCALAR_COLUMNS)
    for prefix, _, _ in WORKER_BLOCKS:
        cols += [f"{prefix}_{k}" for k in range(num_workers)]
    return cols


def write_metrics_csv(epochs: Sequence[EpochStats], path) -> None:
    k = len(epochs[0].batches) if epochs else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(k))
        for st in epochs:
            row = [st.epoch, st.sim_time, st.lr, st.loss, st.train_acc, st.eval_acc,
                   st.mean_round_time, st.spread, st.saturated, st.iterations]
            for _, attr, _ in WORKER_BLOCKS:
                row += list(getattr(st, attr))
            w.writerow([_fmt(v) for v in row])


def read_metrics_csv(path) -> List[EpochStats]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    k = sum(1 for h in header if h.startswith("b_"))
    out = []
    for r in rows:
        blocks = {attr: tuple(conv(r[f"{prefix}_{i}"]) for i in range(k))
                  for prefix, attr, conv in WORKER_BLOCKS}
        out.append(EpochStats(
            epoch=int(r["epoch"]), sim_time=float(r["sim_time"]), lr=float(r["lr"]),
            iterations=int(r["iterations"]), loss=float(r["loss"]), train_acc=float(r["train_acc"]),
            eval_acc=float(r["eval_acc"]), mean_round_time=float(r["mean_round_time"]),
            saturated=r["saturated"] == "1", **blocks,
        ))
    return out


def write_run(metrics: RunMetrics, out_dir, events=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(metrics.epochs, out / METRICS_FILE)
    with open(out / SUMMARY_FILE, "w") as fh:
        json.dump(metrics.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if events is not None:
        events.write(out / EVENTS_FILE)
    return out


def read_run(run_dir) -> RunMetrics:
    run = Path(run_dir)
    if not (run / METRICS_FILE).exists():
        raise ConfigError(f"{run}: no {METRICS_FILE} found")
    summary = {}
    if (run / SUMMARY_FILE).exists():
        with open(run / SUMMARY_FILE) as fh:
            summary = json.load(fh)
    return RunMetrics(read_metrics_csv(run / METRICS_FILE), summary)


def time_to_accuracy(epochs: Sequence[EpochStats], target: float) -> Optional[float]:
    """Simulated seconds at the first epoch whose eval accuracy reaches ``target``."""
    for st in epochs:
        if st.eval_acc >= target:
            return st.sim_time
    return None


def _worker_of(entry) -> int:
    if isinstance(entry, dict):
        return int(entry["worker_id"])
    if hasattr(entry, "worker_id"):
        return int(entry.worker_id)
    return int(entry)


@dataclass
class IterationDensity:
    counts: Dict[int, int]
    shares: Dict[int, float]

    @property
    def skew(self) -> float:
        """Largest over smallest per-worker update count."""
        lo = min(self.counts.values())
        return math.inf if lo == 0 else max(self.counts.values()) / lo


def iteration_density(update_log: Iterable, worker_ids: Optional[Sequence[int]] = None) -> IterationDensity:
    """Per-worker update counts and their normalised shares.

    ``update_log`` may hold log entries, event dicts or bare worker ids.
    Workers listed in ``worker_ids`` but absent from the log count as zero.
    """
    counts = Counter(_worker_of(e) for e in update_log)
    if not counts:
        raise ConfigError("empty update log")
    ids = sorted(set(counts) | set(worker_ids or ()))
    total = sum(counts.values())
    full = {w: counts.get(w, 0) for w in ids}
    return IterationDensity(full, {w: c / total for w, c in full.items()})


def staleness_histogram(stalenesses: Iterable[int]) -> Dict[int, int]:
    hist = Counter(int(s) for s in stalenesses)
    return {k: hist[k] for k in sorted(hist)}


def quartiles(values: Sequence[float]) -> List[float]:
    if not len(values):
        return []
    return [float(q) for q in np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])]


@dataclass
class ComparisonReport:
    tta_baseline: Optional[float]
    tta_treatment: Optional[float]
    tta_delta_pct: Optional[float]
    accuracy_delta_pts: float
    skew_baseline: Optional[float]
    skew_treatment: Optional[float]
    skew_delta: Optional[float]
    regressions: List[str]

    @property
    def tta_reduction_pct(self) -> Optional[float]:
        return None if self.tta_delta_pct is None else -self.tta_delta_pct

    def rows(self) -> List[List[str]]:
        def f(v):
            return "" if v is None else _fmt(float(v))
        return [
            ["metric", "baseline", "treatment", "delta"],
            ["tta_sim_seconds", f(self.tta_baseline), f(self.tta_treatment), f(self.tta_delta_pct)],
            ["accuracy_pts", "", "", f(self.accuracy_delta_pts)],
            ["update_skew", f(self.skew_baseline), f(self.skew_treatment), f(self.skew_delta)],
            ["regressions", "", "", ";".join(self.regressions)],
        ]


_COMPARABLE_KEYS = ("dataset", "model", "mode")


def compare_runs(baseline: RunMetrics, treatment: RunMetrics, accuracy_tolerance: float = 0.0) -> ComparisonReport:
    """Deltas of treatment relative to baseline.

    TTA delta is a percentage of the baseline TTA (negative means faster),
    accuracy delta is in percentage points of final eval accuracy, and skew
    is the max/min per-worker update count ratio (asynchronous runs only).
    """
    cb, ct = baseline.summary.get("config", {}), treatment.summary.get("config", {})
    for key in _COMPARABLE_KEYS:
        if key in cb and key in ct and cb[key] != ct[key]:
            raise ConfigError(f"runs are not comparable: {key} differs")
    if not baseline.epochs or not treatment.epochs:
        raise ConfigError("cannot compare runs without epochs")

    tb, tt = baseline.summary.get("tta"), treatment.summary.get("tta")
    tta_delta = None
    if tb is not None and tt is not None and tb > 0:
        tta_delta = (tt - tb) / tb * 100.0
    acc_delta = (treatment.final_accuracy - baseline.final_accuracy) * 100.0
    sb, st = baseline.summary.get("update_skew"), treatment.summary.get("update_skew")
    skew_delta = None if sb is None or st is None else st - sb

    flags = []
    if tta_delta is not None and tta_delta > 0:
        flags.append("tta_increased")
    if tb is not None and tt is None:
        flags.append("target_not_reached")
    if acc_delta < -accuracy_tolerance * 100.0:
        flags.append("accuracy_dropped")
    if skew_delta is not None and skew_delta > 0:
        flags.append("skew_increased")
    return ComparisonReport(tb, tt, tta_delta, acc_delta, sb, st, skew_delta, flags)
