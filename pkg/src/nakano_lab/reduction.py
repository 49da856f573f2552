"""Deterministic floating-point reductions.

All quadrature and grid accumulations in the package run through
`pairwise_sum`, a fixed-shape pairwise tree over the leading axis.  The
reduction order depends only on the number of summands, never on worker
count or chunking, so reports are bit-identical across parallel runs.
"""

from __future__ import annotations

import numpy as np

__all__ = ["pairwise_sum", "weighted_sum"]


def pairwise_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along `axis` with an explicit balanced pairwise tree."""
    a = np.asarray(values)
    if a.shape[axis] == 0:
        return np.zeros(a.shape[:axis] + a.shape[axis + 1 :], dtype=a.dtype)
    a = np.moveaxis(a, axis, 0)
    while a.shape[0] > 1:
        n = a.shape[0]
        half = n // 2
        if n % 2:
            a = np.concatenate([a[:half] + a[half : 2 * half], a[2 * half :]], axis=0)
        else:
            a = a[:half] + a[half:]
    return a[0]


def weighted_sum(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Pairwise-deterministic sum of weights[i] * values[i] over the leading axis."""
    w = np.asarray(weights)
    v = np.asarray(values)
    extra = (1,) * (v.ndim - 1)
    return pairwise_sum(w.reshape(w.shape[0], *extra) * v, axis=0)
