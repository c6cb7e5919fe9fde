"""Caption generation, candidate ranking, hyperparameter fitting and model averaging."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from . import autodiff as ad
from .gp import CholeskyError, GpModel, PredictiveDistribution, bic, log_marginal_likelihood, predict
from .kernels import DEFAULT_PRIORS, Expression, Term, sample_hyperparameters
from .model import KittModel
from .vocab import STOP, caption_to_expression

log = logging.getLogger(__name__)

LOG_BOUNDS = (math.log(1e-6), math.log(1e6))
ID_BOUNDS = (-1e3, 1e3)
NOISE_BOUNDS = (math.log(1e-6), math.log(1e3))
REJECTED = 1e25
GRAD_TOL = 1e-4


class FitError(RuntimeError):
    pass


@dataclass
class CandidateKernel:
    expression: Expression
    caption_log_prob: float = 0.0
    caption: tuple[str, ...] = ()
    noise: float | None = None
    lml: float | None = None
    bic: float | None = None
    init_lml: float | None = None
    converged: bool = False
    grad_norm: float | None = None
    fit_seconds: float = 0.0

    @property
    def text(self) -> str:
        return str(self.expression) if self.expression.terms else "(noise only)"

    @property
    def fitted(self) -> bool:
        return self.lml is not None

    def gp_model(self) -> GpModel:
        if not self.fitted:
            raise FitError("candidate has not been fitted")
        return GpModel(self.expression, self.noise)

    def predict(self, X_train, y_train, X_test) -> PredictiveDistribution:
        return predict(X_train, y_train, X_test, self.gp_model())

    def to_dict(self) -> dict:
        return {
            "expression": self.text,
            "terms": list(self.expression.token_names),
            "caption": list(self.caption),
            "caption_log_prob": self.caption_log_prob,
            "hyperparameters": self.expression.hyperparameters(),
            "noise": self.noise,
            "lml": self.lml,
            "bic": self.bic,
            "init_lml": self.init_lml,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "fit_seconds": self.fit_seconds,
        }


# ---------------------------------------------------------------------------
# hyperparameter fitting


def _bounds(expr: Expression, fixed=None):
    """Box bounds in vector order; ``fixed`` maps layout keys to pinned values."""
    fixed = dict(fixed or {})
    bounds = []
    for key, transform, size in expr.param_layout():
        if key in fixed:
            v = np.broadcast_to(np.asarray(fixed.pop(key), dtype=float), (size,))
            u = np.log(v) if transform == "log" else v
            bounds += [(float(a), float(a)) for a in u]
        else:
            bounds += [LOG_BOUNDS if transform == "log" else ID_BOUNDS] * size
    if fixed:
        raise KeyError(f"unknown parameter keys {sorted(fixed)}")
    return bounds + [NOISE_BOUNDS]


def _draw_model(expr: Expression, n_dims: int, rng, priors) -> GpModel:
    terms = [sample_hyperparameters(t.factors, n_dims, rng, priors) for t in expr.terms]
    noise = float(priors["noise"].sample(rng))
    return GpModel(Expression(terms, expr.max_terms), noise)


def fit_hyperparameters(X, y, expr: Expression, n_init: int = 1000, rng=None, priors=None,
                        maxiter: int = 1000, fixed=None) -> CandidateKernel:
    """Best of ``n_init`` prior draws, then L-BFGS-B on the log marginal likelihood.

    Parameters are optimized in unconstrained space (log for positive
    quantities, identity for cosine lengthscales and linear shifts) within
    wide box bounds.  A non-converged optimizer still returns its best iterate
    with ``converged=False``.  ``fixed`` pins parameters by layout key, for
    example ``{"1.1.LIN.shift": 0.0}``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    rng = np.random.default_rng(rng)
    priors = DEFAULT_PRIORS if priors is None else {**DEFAULT_PRIORS, **priors}
    t0 = time.perf_counter()
    skeleton = Expression([Term(t.factors) for t in expr.terms], expr.max_terms)
    bounds = _bounds(_draw_model(skeleton, X.shape[1], np.random.default_rng(0), priors).expr, fixed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    best, best_val = None, -np.inf
    for _ in range(max(1, n_init)):
        model = _draw_model(skeleton, X.shape[1], rng, priors)
        theta = np.clip(model.to_vector(), lo, hi)
        model = model.with_vector(theta)
        try:
            val, _ = log_marginal_likelihood(X, y, model, grad=False)
        except CholeskyError:
            continue
        if val > best_val:
            best, best_val = model, val
    if best is None:
        raise FitError(f"every initialization of {expr} failed")

    template = best

    def objective(theta):
        try:
            val, grad = log_marginal_likelihood(X, y, template.with_vector(theta))
        except (CholeskyError, FloatingPointError, ValueError):
            return REJECTED, np.zeros_like(theta)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            return REJECTED, np.zeros_like(theta)
        return -val, -grad

    theta0 = best.to_vector()
    res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-6})
    theta = res.x if res.fun <= -best_val else theta0
    fitted = template.with_vector(theta)
    lml, grad = log_marginal_likelihood(X, y, fitted)
    if lml < best_val:  # guard against a worse final iterate
        fitted, (lml, grad) = best, log_marginal_likelihood(X, y, best)
    # projected gradient: components pushing out of an active bound do not count
    at_lo = np.isclose(theta, lo) & (grad < 0)
    at_hi = np.isclose(theta, hi) & (grad > 0)
    pgrad = np.where(at_lo | at_hi, 0.0, grad)
    k = fitted.n_params()
    gnorm = float(np.linalg.norm(pgrad))
    # line-search stops at machine precision are reported as failures by scipy
    converged = bool(res.success) or gnorm < GRAD_TOL
    return CandidateKernel(
        expression=fitted.expr, noise=fitted.noise, lml=float(lml),
        bic=bic(lml, k, len(y)), init_lml=float(best_val), converged=converged,
        grad_norm=gnorm, fit_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# captioning


def encode_dataset(model: KittModel, X, y):
    with ad.no_grad():
        return model.encode(np.asarray(X)[None], np.asarray(y)[None])


def generate_caption(model: KittModel, X, y, mode: str = "greedy", temperature: float = 1.0,
                     rng=None, encodings=None) -> tuple[list[int], float]:
    """Decode one caption; returns token ids (ending in STOP if it stopped) and its log-probability.

    Greedy takes the argmax at each step; stochastic samples from the
    temperature-scaled distribution.  The returned log-probability always
    uses the untempered network probabilities.
    """
    if mode not in ("greedy", "stochastic"):
        raise ValueError("mode must be 'greedy' or 'stochastic'")
    rng = np.random.default_rng(rng)
    H = encode_dataset(model, X, y) if encodings is None else encodings
    stop = model.vocab.stop_id
    prompt: list[int] = []
    log_prob = 0.0
    while True:
        p = model.decode_step(H, prompt)
        logp = np.log(np.maximum(p, 1e-300))
        if mode == "greedy" or temperature <= 1e-8:
            tok = int(np.argmax(p))
        else:
            z = logp / temperature
            q = np.exp(z - logsumexp(z))
            tok = int(rng.choice(len(q), p=q / q.sum()))
        log_prob += float(logp[tok])
        prompt.append(tok)
        if tok == stop or len(prompt) >= model.config.max_caption_len:
            break
    return prompt, log_prob


def top_candidates(model: KittModel, X, y, n_samples: int = 16, k: int = 3, rng=None,
                   temperature: float = 1.0) -> list[CandidateKernel]:
    """Greedy caption plus ``n_samples`` stochastic ones, merged by expression, best ``k``."""
    if n_samples < k:
        raise ValueError("n_samples must be >= k")
    rng = np.random.default_rng(rng)
    H = encode_dataset(model, X, y)
    captions = [generate_caption(model, X, y, "greedy", encodings=H)]
    captions += [generate_caption(model, X, y, "stochastic", temperature, rng, encodings=H)
                 for _ in range(n_samples)]
    best: dict[tuple, CandidateKernel] = {}
    for ids, lp in captions:
        expr = caption_to_expression(ids, model.vocab)
        key = expr.canonical_key
        tokens = tuple(model.vocab.decode(i) for i in ids)
        if key not in best or lp > best[key].caption_log_prob:
            best[key] = CandidateKernel(expr, lp, tokens)
    ranked = sorted(best.values(), key=lambda c: (-c.caption_log_prob, c.expression.canonical_key))
    if all(not c.expression.terms for c in ranked):
        warnings.warn("model emitted only STOP; returning the noise-only candidate", RuntimeWarning)
        return ranked[:1]
    return ranked[:k]


# ---------------------------------------------------------------------------
# model averaging


def candidate_weights(candidates, weighting: str = "network") -> np.ndarray:
    if not candidates:
        raise ValueError("no candidates")
    if weighting == "network":
        logw = np.array([c.caption_log_prob for c in candidates], dtype=float)
    elif weighting == "bic":
        logw = np.array([-0.5 * c.bic for c in candidates], dtype=float)
    elif weighting == "uniform":
        logw = np.zeros(len(candidates))
    else:
        raise ValueError("weighting must be 'network', 'bic' or 'uniform'")
    return np.exp(logw - logsumexp(logw))


def mixture(preds, weights) -> PredictiveDistribution:
    """Moments of a Gaussian mixture: mean ``sum w m``, variance ``sum w (v + m^2) - mean^2``."""
    if not preds:
        raise ValueError("no predictive distributions")
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    M = np.stack([p.mean for p in preds])
    V = np.stack([p.variance for p in preds])
    mean = w @ M
    # same quantity as sum w (v + m^2) - mean^2, without the cancellation
    var = w @ (V + (M - mean) ** 2)
    return PredictiveDistribution(mean, var, {"weights": w.tolist()})


def model_average(candidates, weighting: str, X_train, y_train, X_test) -> PredictiveDistribution:
    if not candidates:
        raise ValueError("no candidates")
    w = candidate_weights(candidates, weighting)
    return mixture([c.predict(X_train, y_train, X_test) for c in candidates], w)


@dataclass
class KernelPrediction:
    candidates: list[CandidateKernel]
    weights: np.ndarray
    timings: dict = field(default_factory=dict)


def predict_kernel(model: KittModel, X, y, n_samples: int = 16, k: int = 3, weighting: str = "network",
                   n_init: int = 1000, rng=None) -> KernelPrediction:
    """Caption the dataset, fit the top ``k`` candidates, and weight them."""
    rng = np.random.default_rng(rng)
    t0 = time.perf_counter()
    cands = top_candidates(model, X, y, n_samples, k, rng)
    t1 = time.perf_counter()
    fitted = []
    for c in cands:
        try:
            f = fit_hyperparameters(X, y, c.expression, n_init, rng)
        except FitError as exc:
            log.warning("dropping candidate %s: %s", c.text, exc)
            continue
        f.caption_log_prob, f.caption = c.caption_log_prob, c.caption
        fitted.append(f)
    t2 = time.perf_counter()
    if not fitted:
        raise FitError("no candidate could be fitted")
    return KernelPrediction(fitted, candidate_weights(fitted, weighting),
                            {"kernel_prediction": t1 - t0, "hyperparameter_fit": t2 - t1, "total": t2 - t0})


__all__ = [
    "CandidateKernel", "FitError", "KernelPrediction", "STOP", "candidate_weights", "encode_dataset",
    "fit_hyperparameters", "generate_caption", "mixture", "model_average", "predict_kernel",
    "top_candidates",
]
