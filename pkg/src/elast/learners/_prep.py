from __future__ import annotations

import numpy as np

from ..exceptions import DataError


def as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DataError(f"{name} must be a vector or a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite entries")
    return a


def column_stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and scale; constant columns get scale 1."""
    mean = a.mean(axis=0)
    scale = a.std(axis=0)
    scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 1.0)
    return mean, scale


def split_rows(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def chunks(n: int, size: int = 1 << 15):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))
