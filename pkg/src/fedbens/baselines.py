"""One-shot aggregation baselines: size-weighted averaging and diagonal Fisher merging."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class BaselineResult:
    params: np.ndarray
    method: str


def one_shot_fedavg(models: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """Average of client models weighted by local sample counts (no neuron alignment)."""
    if len(models) == 0:
        raise ValueError("need at least one model")
    if len(models) != len(sizes):
        raise ValueError(f"{len(models)} models but {len(sizes)} sizes")
    w = np.asarray(sizes, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sizes must be non-negative with a positive total")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in models])
    return (w / w.sum()) @ stacked


def fisher_merge_diag(means: Sequence[np.ndarray], fishers: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise Fisher-weighted mean: ``sum_c F_c * w_c / sum_c F_c``."""
    if len(means) == 0 or len(means) != len(fishers):
        raise ValueError("need one Fisher diagonal per model")
    w = np.stack([np.asarray(m, dtype=np.float64) for m in means])
    f = np.stack([np.asarray(x, dtype=np.float64) for x in fishers])
    denom = f.sum(axis=0)
    if np.any(denom <= 0):
        raise ZeroDivisionError("Fisher weights sum to zero for some coordinate")
    return (f * w).sum(axis=0) / denom
