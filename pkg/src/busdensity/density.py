"""BI-RADS density categories and probability-vector helpers."""

from __future__ import annotations

import numpy as np

DENSITIES = ("A", "B", "C", "D")
N_CLASSES = len(DENSITIES)
SIMPLEX_TOL = 1e-9


def density_index(code) -> int:
    """Map a density letter (or an integer index) to 0..3."""
    if isinstance(code, (int, np.integer)) and not isinstance(code, bool):
        if 0 <= code < N_CLASSES:
            return int(code)
        raise ValueError(f"density index out of range: {code}")
    try:
        return DENSITIES.index(str(code).strip().upper())
    except ValueError:
        raise ValueError(f"unknown density code: {code!r}") from None


def encode_labels(labels) -> np.ndarray:
    return np.array([density_index(v) for v in labels], dtype=np.int64)


def one_hot(idx, n_classes: int = N_CLASSES) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros(idx.shape + (n_classes,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def check_distribution(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate one (4,) or many (n, 4) density distributions and return them as float arrays."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != N_CLASSES:
        raise ValueError(f"expected {N_CLASSES} class probabilities, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite probabilities")
    if np.any(p < -tol) or np.any(p > 1 + tol):
        raise ValueError("probabilities outside [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("probabilities do not sum to 1")
    return p


def argmax_class(p) -> np.ndarray:
    """Most probable class; ties go to the lower index (toward A)."""
    # np.argmax returns the first maximum, which is the lower index.
    return np.argmax(np.asarray(p), axis=-1)
