"""Desk-scale differentiable models and the three local-update variants.

Models are flat float64 parameter vectors so that exchange, averaging, and
cosine comparison all operate on one array type. Supported architectures:
softmax regression and a one-hidden-layer tanh MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigError, ProtocolError

SOFTMAX = "softmax"
MLP = "mlp"

INIT_SCALE = 0.05  # uniform [-0.05, 0.05] per entry


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor; parameter count is a pure function of it."""

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in (SOFTMAX, MLP):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigError("model needs input_dim >= 1 and num_classes >= 2")
        if self.kind == MLP and self.hidden_dim < 1:
            raise ConfigError("MLP needs hidden_dim >= 1")

    @property
    def param_count(self) -> int:
        if self.kind == SOFTMAX:
            return (self.input_dim + 1) * self.num_classes
        return (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes


@dataclass(frozen=True)
class HyperParams:
    lr: float = 1e-3
    local_epochs: int = 2
    batch_size: int = 32
    prox_mu: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local_epochs and batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be non-negative")


@dataclass
class ControlVariate:
    """SCAFFOLD drift-correction pair; both vectors have the model's length."""

    local_c: np.ndarray
    global_c: np.ndarray

    @classmethod
    def zeros(cls, param_count: int) -> "ControlVariate":
        return cls(np.zeros(param_count), np.zeros(param_count))


def _views(w: np.ndarray, spec: ModelSpec):
    """Split a flat parameter vector into weight/bias views (no copies)."""
    d, c = spec.input_dim, spec.num_classes
    if spec.kind == SOFTMAX:
        return w[: d * c].reshape(d, c), w[d * c :]
    h = spec.hidden_dim
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * c
    return w[:o1].reshape(d, h), w[o1:o2], w[o2:o3].reshape(h, c), w[o3:]


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Seeded uniform [-INIT_SCALE, INIT_SCALE] initialization."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.param_count)


def _check_batch(w: np.ndarray, X: np.ndarray, y: np.ndarray, spec: ModelSpec):
    if w.shape != (spec.param_count,):
        raise ConfigError(f"parameter vector has length {w.shape}, spec wants {spec.param_count}")
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigError(f"feature dim {X.shape} does not match input_dim {spec.input_dim}")
    if X.shape[0] == 0:
        raise ConfigError("empty batch")
    if X.shape[0] != y.shape[0]:
        raise ConfigError("feature/label count mismatch")


def loss_and_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray, spec: ModelSpec):
    """Mean cross-entropy over the batch and its gradient w.r.t. w."""
    _check_batch(w, X, y, spec)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    grad = np.empty_like(w)
    if spec.kind == SOFTMAX:
        W, b = _views(w, spec)
        gW, gb = _views(grad, spec)
        loss = kernels.softmax_loss_grad(X, y, W, b, gW, gb)
    else:
        W1, b1, W2, b2 = _views(w, spec)
        gW1, gb1, gW2, gb2 = _views(grad, spec)
        loss = kernels.mlp_loss_grad(X, y, W1, b1, W2, b2, gW1, gb1, gW2, gb2)
    if not np.isfinite(loss):
        raise ProtocolError("non-finite loss: model diverged")
    return float(loss), grad


def sgd_step(w: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return w - lr * grad


def prox_grad(grad: np.ndarray, w: np.ndarray, w_anchor: np.ndarray, prox_mu: float) -> np.ndarray:
    """FedProx: pull the update toward the last aggregated model."""
    return grad + prox_mu * (w - w_anchor)


def scaffold_grad(grad: np.ndarray, cv: ControlVariate) -> np.ndarray:
    """SCAFFOLD drift-corrected direction."""
    return grad - cv.local_c + cv.global_c


def scaffold_update_cv(
    cv: ControlVariate, w_before: np.ndarray, w_after: np.ndarray, lr: float, steps: int
) -> ControlVariate:
    """Option-II local variate refresh after `steps` SGD steps at rate lr."""
    if steps < 1 or lr <= 0:
        raise ConfigError("scaffold variate update needs steps >= 1 and lr > 0")
    new_local = cv.local_c - cv.global_c + (w_before - w_after) / (steps * lr)
    return ControlVariate(new_local, cv.global_c)


def logits(w: np.ndarray, X: np.ndarray, spec: ModelSpec) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if spec.kind == SOFTMAX:
        W, b = _views(w, spec)
        return X @ W + b
    W1, b1, W2, b2 = _views(w, spec)
    return np.tanh(X @ W1 + b1) @ W2 + b2


def predict(w: np.ndarray, features: np.ndarray, spec: ModelSpec) -> int:
    """Argmax class score; ties broken toward the lowest class index."""
    return int(np.argmax(logits(w, features.reshape(1, -1), spec)[0]))


def predict_batch(w: np.ndarray, X: np.ndarray, spec: ModelSpec) -> np.ndarray:
    return np.argmax(logits(w, X, spec), axis=1)


GradTransform = Callable[[np.ndarray, np.ndarray], np.ndarray]


def local_train(
    w: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    spec: ModelSpec,
    hp: HyperParams,
    rng: np.random.Generator,
    grad_transform: GradTransform | None = None,
) -> tuple[np.ndarray, int]:
    """Minibatch SGD for hp.local_epochs; returns (new weights, step count).

    Batches are reshuffled each epoch from the caller's rng stream; the
    partial final batch is kept. grad_transform, when given, maps
    (grad, current w) to the applied direction (FedProx / SCAFFOLD hooks).
    """
    n = y.shape[0]
    steps = 0
    for _ in range(hp.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            _, g = loss_and_grad(w, X[idx], y[idx], spec)
            if grad_transform is not None:
                g = grad_transform(g, w)
            w = sgd_step(w, g, hp.lr)
            steps += 1
    return w, steps
