"""One-hidden-layer ReLU perceptron trained with Adam and validation early stopping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..density import N_CLASSES, one_hot
from ._common import NotFittedError, check_features, check_training_data, data_digest, log_softmax, softmax

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 512
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 25
    alpha: float = 1e-4  # L2 penalty on weights
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass(eq=False)
class MlpModel:
    params: dict[str, np.ndarray] | None
    config: MlpConfig = field(default_factory=MlpConfig)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    data_digest: str = ""

    kind = "mlp"

    @property
    def seed(self) -> int:
        return self.config.seed

    def predict_proba(self, X) -> np.ndarray:
        if self.params is None:
            raise NotFittedError("MLP model is not trained")
        X, single = check_features(X, self.params["W1"].shape[0])
        p = softmax(forward(self.params, X)[1])
        return p[0] if single else p


def init_params(n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and biases."""
    def bound(fan_in, fan_out):
        return np.sqrt(6.0 / (fan_in + fan_out))

    b1, b2 = bound(n_in, n_hidden), bound(n_hidden, n_out)
    return {
        "W1": rng.uniform(-b1, b1, (n_in, n_hidden)),
        "b1": rng.uniform(-b1, b1, n_hidden),
        "W2": rng.uniform(-b2, b2, (n_hidden, n_out)),
        "b2": rng.uniform(-b2, b2, n_out),
    }


def forward(params, X):
    h = np.maximum(X @ params["W1"] + params["b1"], 0.0)
    return h, h @ params["W2"] + params["b2"]


def loss_and_grad(params, X, Y, alpha: float = 0.0):
    """Mean cross-entropy + alpha / (2n) * ||W||^2 and its gradient (dict keyed like params)."""
    n = X.shape[0]
    h, z = forward(params, X)
    logp = log_softmax(z)
    W1, W2 = params["W1"], params["W2"]
    loss = -np.sum(Y * logp) / n + 0.5 * alpha * (np.sum(W1 * W1) + np.sum(W2 * W2)) / n
    dz = (np.exp(logp) - Y) / n
    dh = (dz @ W2.T) * (h > 0)
    grads = {
        "W1": X.T @ dh + alpha * W1 / n,
        "b1": dh.sum(axis=0),
        "W2": h.T @ dz + alpha * W2 / n,
        "b2": dz.sum(axis=0),
    }
    return loss, grads


def cross_entropy(params, X, y) -> float:
    logp = log_softmax(forward(params, X)[1])
    return float(-np.mean(logp[np.arange(len(y)), y]))


def train_mlp(X, y, X_val, y_val, config: MlpConfig = MlpConfig()) -> MlpModel:
    """Mini-batch Adam with a constant learning rate.

    Training stops once validation cross-entropy has not improved for
    ``config.patience`` consecutive epochs (or at ``max_epochs``); the returned
    model holds the parameters from the best validation epoch.
    """
    X, y = check_training_data(X, y)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if X_val.ndim != 2 or X_val.shape[0] == 0 or X_val.shape[0] != y_val.shape[0]:
        raise ValueError("validation set must be non-empty and aligned")
    if not np.all(np.isfinite(X_val)):
        raise ValueError("non-finite validation features")

    rng = np.random.default_rng(config.seed)
    params = init_params(X.shape[1], config.hidden, N_CLASSES, rng)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    Y = one_hot(y, N_CLASSES)
    n = X.shape[0]
    step = 0

    best = (np.inf, 0, copy.deepcopy(params))
    train_curve, val_curve = [], []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = perm[start:start + config.batch_size]
            loss, grads = loss_and_grad(params, X[batch], Y[batch], config.alpha)
            total += loss * batch.size
            step += 1
            lr_t = config.learning_rate * np.sqrt(1 - config.beta2**step) / (1 - config.beta1**step)
            for k in PARAM_NAMES:
                m[k] = config.beta1 * m[k] + (1 - config.beta1) * grads[k]
                v[k] = config.beta2 * v[k] + (1 - config.beta2) * grads[k] ** 2
                params[k] = params[k] - lr_t * m[k] / (np.sqrt(v[k]) + config.eps)
        train_curve.append(total / n)
        val = cross_entropy(params, X_val, y_val)
        val_curve.append(val)
        if val < best[0]:
            best = (val, epoch, copy.deepcopy(params))
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return MlpModel(best[2], config, train_curve, val_curve, best[1], data_digest(X, y))
