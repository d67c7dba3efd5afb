"""Repetition-averaged predictions."""

from __future__ import annotations

import numpy as np


def ensemble_average(prob_tables: list) -> np.ndarray:
    """Arithmetic cellwise mean of equally-shaped probability tables,
    renormalized to absorb accumulated float drift."""
    if not prob_tables:
        raise ValueError("need at least one probability table")
    shape = np.asarray(prob_tables[0]).shape
    stacked = []
    for t in prob_tables:
        t = np.asarray(t, dtype=np.float64)
        if t.shape != shape:
            raise ValueError(f"probability table shapes differ: {t.shape} vs {shape}")
        stacked.append(t)
    mean = np.mean(stacked, axis=0)
    sums = mean.sum(axis=-1, keepdims=True)
    return mean / sums
