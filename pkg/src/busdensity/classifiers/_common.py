from __future__ import annotations

import hashlib

import numpy as np

from ..density import N_CLASSES


class NotFittedError(RuntimeError):
    pass


def check_training_data(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X must be (n, d) matching y; got {X.shape} and {y.shape}")
    if X.shape[0] == 0:
        raise ValueError("no training rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ValueError("labels must be class indices 0..3")
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    return X, y


def check_features(X, n_features: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    return X, single


def data_digest(X, y) -> str:
    h = hashlib.sha256()
    X = np.ascontiguousarray(np.asarray(X, dtype="<f8"))
    y = np.ascontiguousarray(np.asarray(y, dtype="<i8"))
    h.update(str(X.shape).encode())
    h.update(X.tobytes())
    h.update(y.tobytes())
    return h.hexdigest()


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
