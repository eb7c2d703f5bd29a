"""Four-class density classifiers over histogram features."""

from __future__ import annotations

import csv

import numpy as np

from ..density import SIMPLEX_TOL, check_distribution
from ._common import NotFittedError
from .forest import ForestConfig, ForestModel, Tree, train_forest
from .io import ModelFileError, load_model, save_model
from .logreg import LogRegConfig, LogRegModel, train_logreg
from .mlp import MlpConfig, MlpModel, train_mlp

PREDICTION_COLUMNS = ("image_id", "patient_id", "pA", "pB", "pC", "pD")


def predict_proba(model, X) -> np.ndarray:
    """Density distribution(s) for one feature vector (16,) or a batch (n, 16)."""
    if hasattr(X, "bins"):
        X = X.bins
    p = model.predict_proba(X)
    return check_distribution(p)


def write_predictions(image_ids, patient_ids, probs, path) -> None:
    probs = check_distribution(np.atleast_2d(probs))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for iid, pid, p in zip(image_ids, patient_ids, probs):
            w.writerow([iid, pid] + [repr(float(v)) for v in p])


def read_predictions(path) -> tuple[list[str], list[str], np.ndarray]:
    """Read a prediction CSV (ours or an external model's) as (image_ids, patient_ids, probs)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PREDICTION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: prediction CSV missing columns {missing}")
        rows = list(reader)
    probs = np.array([[float(r[c]) for c in PREDICTION_COLUMNS[2:]] for r in rows]).reshape(-1, 4)
    # External files may carry rounded probabilities; accept 1e-6 slack and renormalize.
    probs = check_distribution(probs, tol=1e-6)
    off = np.abs(probs.sum(axis=1) - 1.0) > SIMPLEX_TOL
    if np.any(off) or np.any(probs < 0):
        fixed = np.clip(probs, 0.0, None)
        fixed = fixed / fixed.sum(axis=1, keepdims=True)
        bad = off | np.any(probs < 0, axis=1)
        probs[bad] = fixed[bad]
    return [r["image_id"] for r in rows], [r["patient_id"] for r in rows], probs


__all__ = [
    "ForestConfig", "ForestModel", "LogRegConfig", "LogRegModel", "MlpConfig", "MlpModel",
    "ModelFileError", "NotFittedError", "PREDICTION_COLUMNS", "Tree", "load_model", "predict_proba",
    "read_predictions", "save_model", "train_forest", "train_logreg", "train_mlp", "write_predictions",
]
