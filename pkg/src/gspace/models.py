"""Toy differentiable models with exact per-example gradients.

Three model families cover the simulator's needs: scalar linear regression,
binary logistic regression, and a two-layer tanh MLP. Parameters live in a
single flat float64 vector so a model's gradient is directly a point in the
clustering engine's gradient space.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .core import GspaceError
from .rng import substream


def _check_finite(value: float, context: str) -> float:
    if not np.isfinite(value):
        raise GspaceError(f"non-finite value in {context}")
    return float(value)


class LinearRegression:
    """f(x) = w.x with squared loss 0.5 * (f - y)^2; gradient (f - y) * x."""

    name = "linear-regression"

    def __init__(self, input_dim: int):
        if input_dim < 1:
            raise GspaceError("input_dim must be >= 1")
        self.input_dim = input_dim

    @property
    def num_params(self) -> int:
        return self.input_dim

    def reference_params(self, seed: int = 0) -> np.ndarray:
        return np.zeros(self.input_dim)

    def example_loss(self, params, x, y) -> float:
        f = float(np.dot(params, x))
        _check_finite(f, "linear forward")
        return 0.5 * (f - float(y)) ** 2

    def example_grad(self, params, x, y) -> np.ndarray:
        f = float(np.dot(params, x))
        _check_finite(f, "linear forward")
        return (f - float(y)) * np.asarray(x, dtype=np.float64)

    def batch_loss(self, params, X, y) -> float:
        r = X @ params - y
        return _check_finite(0.5 * float(np.mean(r * r)), "linear batch loss")

    def batch_grad(self, params, X, y) -> np.ndarray:
        r = X @ params - y
        return X.T @ r / X.shape[0]


class LogisticModel:
    """Binary logistic regression with labels in {0, 1}.

    Loss is the negative log likelihood; gradient (sigmoid(w.x) - y) * x.
    """

    name = "logistic"

    def __init__(self, input_dim: int):
        if input_dim < 1:
            raise GspaceError("input_dim must be >= 1")
        self.input_dim = input_dim

    @property
    def num_params(self) -> int:
        return self.input_dim

    def reference_params(self, seed: int = 0) -> np.ndarray:
        return np.zeros(self.input_dim)

    @staticmethod
    def _sigmoid(z):
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # numerically stable

    def example_loss(self, params, x, y) -> float:
        z = float(np.dot(params, x))
        _check_finite(z, "logistic forward")
        # log(1 + exp(-z)) + (1 - y) * z, stable for both signs of z
        return float(np.logaddexp(0.0, -z) + (1.0 - float(y)) * z)

    def example_grad(self, params, x, y) -> np.ndarray:
        z = float(np.dot(params, x))
        _check_finite(z, "logistic forward")
        return (self._sigmoid(z) - float(y)) * np.asarray(x, dtype=np.float64)

    def batch_loss(self, params, X, y) -> float:
        z = X @ params
        loss = np.logaddexp(0.0, -z) + (1.0 - y) * z
        return _check_finite(float(np.mean(loss)), "logistic batch loss")

    def batch_grad(self, params, X, y) -> np.ndarray:
        z = X @ params
        return X.T @ (self._sigmoid(z) - y) / X.shape[0]


class TwoLayerMLP:
    """f(x) = a . tanh(W x) with squared loss.

    Flat parameter order: W row-major, then a. ``weight_condition`` sets the
    singular-value spread of the frozen-spectrum reference W (condition
    number of the input-to-hidden map); the reference output weights are
    zero, so reference gradients live entirely in the a-block.
    """

    name = "two-layer-mlp"

    def __init__(self, input_dim: int, hidden_dim: int, weight_condition: float = 1.0):
        if input_dim < 1 or hidden_dim < 1:
            raise GspaceError("input_dim and hidden_dim must be >= 1")
        if hidden_dim > input_dim:
            raise GspaceError("hidden_dim must not exceed input_dim")
        if weight_condition < 1.0:
            raise GspaceError("weight_condition must be >= 1")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.weight_condition = weight_condition

    @property
    def num_params(self) -> int:
        return self.hidden_dim * self.input_dim + self.hidden_dim

    def split(self, params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        h, p = self.hidden_dim, self.input_dim
        return params[: h * p].reshape(h, p), params[h * p :]

    def reference_params(self, seed: int = 0) -> np.ndarray:
        rng = substream(seed, "model-init", self.name)
        h, p = self.hidden_dim, self.input_dim
        # Random orthonormal factors with a controlled singular spectrum.
        qu, _ = np.linalg.qr(rng.standard_normal((h, h)))
        qv, _ = np.linalg.qr(rng.standard_normal((p, h)))
        spectrum = np.geomspace(1.0, 1.0 / self.weight_condition, h)
        W = qu @ np.diag(spectrum) @ qv.T
        return np.concatenate([W.ravel(), np.zeros(h)])

    def example_loss(self, params, x, y) -> float:
        W, a = self.split(np.asarray(params, dtype=np.float64))
        t = np.tanh(W @ x)
        f = float(np.dot(a, t))
        _check_finite(f, "mlp forward")
        return 0.5 * (f - float(y)) ** 2

    def example_grad(self, params, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        W, a = self.split(np.asarray(params, dtype=np.float64))
        t = np.tanh(W @ x)
        f = float(np.dot(a, t))
        _check_finite(f, "mlp forward")
        r = f - float(y)
        grad_W = np.outer(r * a * (1.0 - t * t), x)
        grad_a = r * t
        return np.concatenate([grad_W.ravel(), grad_a])

    def batch_loss(self, params, X, y) -> float:
        W, a = self.split(np.asarray(params, dtype=np.float64))
        T = np.tanh(X @ W.T)
        r = T @ a - y
        return _check_finite(0.5 * float(np.mean(r * r)), "mlp batch loss")

    def batch_grad(self, params, X, y) -> np.ndarray:
        W, a = self.split(np.asarray(params, dtype=np.float64))
        T = np.tanh(X @ W.T)
        r = T @ a - y
        n = X.shape[0]
        grad_a = T.T @ r / n
        grad_W = ((r[:, None] * (1.0 - T * T) * a).T @ X) / n
        return np.concatenate([grad_W.ravel(), grad_a])


def make_model(name: str, input_dim: int, hidden_dim: int = 8, weight_condition: float = 1.0):
    """Instantiate a toy model by its config name."""
    if name == LinearRegression.name:
        return LinearRegression(input_dim)
    if name == LogisticModel.name:
        return LogisticModel(input_dim)
    if name == TwoLayerMLP.name:
        return TwoLayerMLP(input_dim, hidden_dim, weight_condition)
    raise GspaceError(
        f"unknown model {name!r} (choose from linear-regression, logistic, two-layer-mlp)"
    )
