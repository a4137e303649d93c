"""Training-memory decomposition and the linear batch-memory estimators."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InfeasibleAllocationError

log = logging.getLogger(__name__)

# optimizer state as a multiple of the model size
OPTIMIZER_STATE = {"sgd": 0, "momentum": 1, "adam": 2}


@dataclass(frozen=True)
class MemoryProfile:
    m_model: float
    m_grad: float
    m_opt: float = 0.0
    m_act_per_sample: float = 0.0
    m_batch_slope: float = 0.0
    m_batch_intercept: float = 0.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigError(f"memory profile field {name} must be >= 0, got {value}")

    @classmethod
    def for_model(cls, num_params: int, bytes_per_param: int = 8, optimizer: str = "sgd",
                  act_per_sample: float = 0.0, batch_slope: float = 0.0,
                  batch_intercept: float = 0.0) -> "MemoryProfile":
        try:
            mult = OPTIMIZER_STATE[optimizer]
        except KeyError:
            raise ConfigError(f"unknown optimizer {optimizer!r}; choose from {sorted(OPTIMIZER_STATE)}") from None
        m_model = float(num_params * bytes_per_param)
        return cls(m_model, m_model, mult * m_model, act_per_sample, batch_slope, batch_intercept)

    @property
    def fixed(self) -> float:
        return self.m_model + self.m_grad + self.m_opt + self.m_batch_intercept

    @property
    def per_sample(self) -> float:
        return self.m_act_per_sample + self.m_batch_slope


def total_memory(profile: MemoryProfile, batch_size: int) -> float:
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    return (profile.m_model + profile.m_grad + profile.m_opt
            + profile.m_act_per_sample * batch_size
            + profile.m_batch_slope * batch_size + profile.m_batch_intercept)


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float

    def __iter__(self):
        return iter((self.slope, self.intercept, self.r_squared))


def fit_batch_memory(samples: Iterable[Tuple[float, float]]) -> LinearFit:
    """Least-squares line through ``(batch_size, bytes)`` points."""
    pts = np.asarray(list(samples), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ConfigError("need at least two (batch_size, bytes) samples")
    b, y = pts[:, 0], pts[:, 1]
    if np.unique(b).size < 2:
        raise ConfigError("degenerate fit: all samples share one batch size")
    design = np.column_stack([b, np.ones_like(b)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (slope * b + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(float(slope), float(intercept), r2)


def max_safe_batch(profile: MemoryProfile, memory_budget: float, hard_cap: int = 1 << 20) -> int:
    """Largest batch whose total memory fits in ``memory_budget`` (at least 1).

    A profile with no per-sample cost never runs out of memory; ``hard_cap``
    is returned in that case.
    """
    if memory_budget < profile.fixed:
        raise InfeasibleAllocationError(
            f"budget {memory_budget} below fixed memory {profile.fixed}"
        )
    if profile.per_sample == 0:
        log.warning("per-sample memory is zero; batch size unbounded, using hard cap %d", hard_cap)
        return hard_cap
    b = max(int(math.floor((memory_budget - profile.fixed) / profile.per_sample)), 1)
    # float rounding can put the estimate one off either way
    while b > 1 and total_memory(profile, b) > memory_budget:
        b -= 1
    while total_memory(profile, b + 1) <= memory_budget:
        b += 1
    return min(b, hard_cap)


def measure_batch_memory(model, feature_dim: int, batch_sizes: Sequence[int],
                         overhead_bytes: int = 0) -> List[Tuple[int, int]]:
    """Bytes the simulator allocates per step for each batch size.

    Counts the feature block, label vector and forward activations actually
    materialised as float64/int64 arrays, plus a fixed loader overhead.
    """
    out = []
    for b in batch_sizes:
        x = np.zeros((b, feature_dim), dtype=np.float64)
        y = np.zeros(b, dtype=np.int64)
        act = np.zeros(model.activation_floats(b), dtype=np.float64)
        out.append((int(b), int(x.nbytes + y.nbytes + act.nbytes + overhead_bytes)))
    return out
