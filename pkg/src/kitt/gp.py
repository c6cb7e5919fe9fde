"""Exact GP regression: sampling, marginal likelihood, prediction, metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import Expression, eval_kernel, eval_kernel_diag, kernel_and_grads

LOG_2PI = math.log(2 * math.pi)
MAX_JITTER = 1e-2


class CholeskyError(np.linalg.LinAlgError):
    """Covariance matrix was not numerically positive definite."""


@dataclass
class GpModel:
    expr: Expression
    noise: float = 0.1
    jitter: float = 1e-6

    def __post_init__(self):
        if not self.noise > 0:
            raise ValueError("likelihood noise must be positive")
        if not self.jitter > 0:
            raise ValueError("jitter must be positive")

    # unconstrained vector: kernel params followed by log noise
    def to_vector(self) -> np.ndarray:
        return np.append(self.expr.to_vector(), math.log(self.noise))

    def with_vector(self, theta) -> GpModel:
        theta = np.asarray(theta, dtype=float)
        return GpModel(self.expr.with_vector(theta[:-1]), float(np.exp(theta[-1])), self.jitter)

    def n_params(self) -> int:
        return self.expr.n_params() + 1


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray
    extra: dict = field(default_factory=dict)

    def denormalize(self, y_mean: float, y_std: float) -> PredictiveDistribution:
        return PredictiveDistribution(self.mean * y_std + y_mean, self.variance * y_std ** 2, dict(self.extra))


def _cholesky(A: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise CholeskyError(str(exc)) from None


def _train_cov(X, model: GpModel) -> np.ndarray:
    K = eval_kernel(model.expr, X)
    K[np.diag_indices_from(K)] += model.noise + model.jitter
    return K


def sample_gp(X, model: GpModel, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``y ~ N(0, K + (noise + jitter) I)``.

    The jitter is escalated tenfold up to ``1e-2`` before giving up.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = eval_kernel(model.expr, X)
    K[np.diag_indices_from(K)] += model.noise
    jitter = model.jitter
    while True:
        try:
            L = _cholesky(K + jitter * np.eye(len(K)))
            break
        except CholeskyError:
            jitter *= 10
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise CholeskyError(
                    f"covariance of {model.expr} not PD with jitter up to {MAX_JITTER}; "
                    f"hyperparameters={model.expr.hyperparameters()}"
                ) from None
    n = len(K)
    z = rng.standard_normal(n if size is None else (size, n))
    return z @ L.T if size is not None else L @ z


def log_marginal_likelihood(X, y, model: GpModel, grad: bool = True):
    """``log N(y; 0, K + noise I)`` and its gradient in unconstrained space.

    Raises :class:`CholeskyError` when the covariance is not PD; optimizers
    treat that as a rejected step.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = len(y)
    if grad:
        K, dKs = kernel_and_grads(model.expr, X)
    else:
        K, dKs = eval_kernel(model.expr, X), []
    K[np.diag_indices_from(K)] += model.noise + model.jitter
    L = _cholesky(K)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    if not grad:
        return float(value), None
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    g = np.empty(len(dKs) + 1)
    for i, dK in enumerate(dKs):
        g[i] = 0.5 * np.einsum("ij,ij->", W, dK)
    g[-1] = 0.5 * model.noise * np.trace(W)
    return float(value), g


def predict(X_train, y_train, X_test, model: GpModel) -> PredictiveDistribution:
    """Posterior predictive at ``X_test``; variance includes observation noise."""
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    X_test = np.asarray(X_test, dtype=float).reshape(-1, X_train.shape[1])
    y_train = np.asarray(y_train, dtype=float).ravel()
    if len(X_test) == 0:
        return PredictiveDistribution(np.zeros(0), np.zeros(0))
    L = _cholesky(_train_cov(X_train, model))
    Ks = eval_kernel(model.expr, X_test, X_train)
    alpha = linalg.cho_solve((L, True), y_train, check_finite=False)
    mean = Ks @ alpha
    V = linalg.solve_triangular(L, Ks.T, lower=True, check_finite=False)
    var = eval_kernel_diag(model.expr, X_test) - (V ** 2).sum(0) + model.noise
    return PredictiveDistribution(mean, np.maximum(var, model.noise))


def metrics(pred: PredictiveDistribution, y_true) -> dict[str, float]:
    """Mean negative log predictive density and RMSE."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    if len(y_true) != len(pred.mean):
        raise ValueError("prediction and target lengths differ")
    if np.any(pred.variance <= 0):
        raise ValueError("predictive variance must be positive")
    resid = y_true - pred.mean
    nlpd = 0.5 * (LOG_2PI + np.log(pred.variance) + resid ** 2 / pred.variance)
    return {"nlpd": float(nlpd.mean()), "rmse": float(np.sqrt(np.mean(resid ** 2)))}


def bic(log_likelihood: float, n_params: int, n_points: int) -> float:
    """``k ln n - 2 log L``; lower is better."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    return n_params * math.log(n_points) - 2.0 * log_likelihood
