"""Central finite-difference gradient checks."""

from __future__ import annotations

import typing as t

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute difference, scaled by the larger of the two gradients' magnitudes."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_gradient(
    objective: t.Callable[[], float],
    array: np.ndarray,
    *,
    eps: float = 1e-6,
    indices: t.Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of ``objective`` w.r.t. entries of ``array`` (perturbed in place).

    Only ``indices`` are evaluated when given; other entries stay zero.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    positions = indices if indices is not None else list(np.ndindex(array.shape))
    for idx in positions:
        original = array[idx]
        array[idx] = original + eps
        plus = objective()
        array[idx] = original - eps
        minus = objective()
        array[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def gradient_check(
    objective: t.Callable[[], float],
    array: np.ndarray,
    analytic: np.ndarray,
    *,
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Relative error between ``analytic`` and central differences of ``objective``.

    With ``max_entries``, a random subset of that many entries is compared.
    """
    indices = None
    if max_entries is not None and array.size > max_entries:
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(array.size, size=max_entries, replace=False)
        indices = [np.unravel_index(i, array.shape) for i in flat]
        mask = np.zeros(array.shape, dtype=bool)
        for idx in indices:
            mask[idx] = True
        analytic = np.where(mask, analytic, 0.0)
    numeric = numeric_gradient(objective, array, eps=eps, indices=indices)
    return relative_error(analytic, numeric)
