"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (x is not modified)."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def numeric_grad_entries(
    f: Callable[[], float], arrays: Iterable[tuple[np.ndarray, tuple]], h: float = 1e-5
) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. selected entries of arrays mutated in place."""
    out = []
    for arr, idx in arrays:
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        out.append((up - down) / (2.0 * h))
    return np.asarray(out)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute discrepancy, relative to the larger gradient's max-abs entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)
