"""Self-describing JSON model files with bit-exact array payloads."""

from __future__ import annotations

import base64
import dataclasses
import json
import platform
import warnings

import numpy as np

from .. import __version__
from .forest import ForestConfig, ForestModel, Tree
from .logreg import LogRegConfig, LogRegModel
from .mlp import MlpConfig, MlpModel

FORMAT = "busdensity-model"
FORMAT_VERSION = 1
KINDS = {"logreg": LogRegModel, "forest": ForestModel, "mlp": MlpModel}


class ModelFileError(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def _enc(a: np.ndarray) -> dict:
    a = np.asarray(a)
    dtype = "<i8" if np.issubdtype(a.dtype, np.integer) else "<f8"
    buf = np.ascontiguousarray(a, dtype=dtype)
    return {"dtype": dtype, "shape": list(a.shape), "data": base64.b64encode(buf.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"], validate=True)
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _payload(model) -> tuple[dict, dict]:
    if isinstance(model, LogRegModel):
        if model.weights is None:
            raise ValueError("cannot save an untrained model")
        hyper = dataclasses.asdict(model.config)
        params = {"weights": _enc(model.weights), "bias": _enc(model.bias)}
        extra = {"n_iter": model.n_iter, "converged": model.converged}
        return hyper, {"params": params, **extra}
    if isinstance(model, ForestModel):
        if not model.trees:
            raise ValueError("cannot save an untrained model")
        hyper = dataclasses.asdict(model.config)
        trees = [
            {k: _enc(getattr(t, k)) for k in ("feature", "threshold", "left", "right", "counts")}
            for t in model.trees
        ]
        return hyper, {"trees": trees, "n_features": model.n_features}
    if isinstance(model, MlpModel):
        if model.params is None:
            raise ValueError("cannot save an untrained model")
        hyper = dataclasses.asdict(model.config)
        params = {k: _enc(v) for k, v in model.params.items()}
        return hyper, {"params": params, "best_epoch": model.best_epoch}
    raise TypeError(f"unsupported model type {type(model).__name__}")


def save_model(model, path) -> None:
    hyper, body = _payload(model)
    doc = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "hyperparameters": hyper,
        "seed": int(model.seed),
        "data_digest": model.data_digest,
        "created_by": {"busdensity": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "body": body,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path, expected_kind: str | None = None, expected_digest: str | None = None):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ModelFileError("bad_model_file", str(err)) from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFileError("bad_model_file", "not a busdensity model file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFileError("version_mismatch", f"file version {doc.get('version')}, expected {FORMAT_VERSION}")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ModelFileError("bad_model_file", f"unknown kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise ModelFileError("kind_mismatch", f"file holds a {kind} model, expected {expected_kind}")
    if expected_digest is not None and doc.get("data_digest") != expected_digest:
        warnings.warn("model training-data digest does not match the expected digest", stacklevel=2)
    try:
        return _build(kind, doc)
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFileError("bad_model_file", f"malformed {kind} payload: {err}") from None


def _build(kind: str, doc: dict):
    hyper, body, digest = doc["hyperparameters"], doc["body"], doc["data_digest"]
    if kind == "logreg":
        p = body["params"]
        return LogRegModel(
            _dec(p["weights"]), _dec(p["bias"]), LogRegConfig(**hyper),
            n_iter=body["n_iter"], converged=body["converged"], data_digest=digest, seed=doc["seed"],
        )
    if kind == "forest":
        trees = [Tree(**{k: _dec(v) for k, v in t.items()}) for t in body["trees"]]
        return ForestModel(trees, body["n_features"], ForestConfig(**hyper), digest)
    params = {k: _dec(v) for k, v in body["params"].items()}
    return MlpModel(params, MlpConfig(**hyper), best_epoch=body["best_epoch"], data_digest=digest)
