"""Primitive kernels, product tokens, sums of products and their priors.

A kernel expression is a sum of product terms.  Each term carries a single
variance and a list of factors, each factor holding its own per-dimension
shape parameters.  Covariances and their derivatives with respect to the
unconstrained hyperparameter vector are computed here; the GP layer only
deals with the assembled matrices.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize, stats

PRIMITIVES = ("RBF", "PER", "NOISE", "M12", "M32", "M52", "COS", "LIN")
STATIONARY = frozenset({"RBF", "PER", "NOISE", "M12", "M32", "M52", "COS"})
# factors whose lengthscales get lognormal priors (and shrinkage correction)
LOGNORMAL_LENGTHSCALE = frozenset({"RBF", "PER", "M12", "M32", "M52"})

# per-kind shape parameters: (name, transform) with transform "log" or "id"
SHAPE_PARAMS = {
    "RBF": (("lengthscale", "log"),),
    "M12": (("lengthscale", "log"),),
    "M32": (("lengthscale", "log"),),
    "M52": (("lengthscale", "log"),),
    "PER": (("lengthscale", "log"), ("period", "log")),
    "COS": (("lengthscale", "id"),),
    "LIN": (("variances", "log"), ("shift", "id")),
    "NOISE": (),
}

REDUNDANT = None

CAUCHY_CLAMP = 1e3


class KernelError(ValueError):
    pass


def reduce_product(a: str, b: str):
    """Canonical sorted pair for ``a*b``, or ``REDUNDANT`` (None).

    Noise times any stationary kernel is again noise, and squaring an RBF or a
    noise kernel reproduces the same family.
    """
    for k in (a, b):
        if k not in PRIMITIVES:
            raise KernelError(f"unknown primitive kernel {k!r}")
    if a == b and a in ("RBF", "NOISE"):
        return REDUNDANT
    if "NOISE" in (a, b):
        other = b if a == "NOISE" else a
        if other in STATIONARY:
            return REDUNDANT
    return tuple(sorted((a, b)))


# ---------------------------------------------------------------------------
# priors


class PriorFamily(str, Enum):
    LOGNORMAL = "lognormal"
    CAUCHY = "cauchy"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class HyperPrior:
    """A prior over one hyperparameter.

    For ``LOGNORMAL`` the two numbers are the mean and std of ``log theta``;
    for ``CAUCHY`` they are location and scale; ``GAUSSIAN`` is mean and std.
    """

    family: PriorFamily
    loc: float = 0.0
    scale: float = 1.0
    target: str = ""

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        if self.family is PriorFamily.LOGNORMAL:
            return np.exp(self.loc + self.scale * rng.standard_normal(size))
        if self.family is PriorFamily.CAUCHY:
            draw = self.loc + self.scale * rng.standard_cauchy(size)
            return np.clip(draw, -CAUCHY_CLAMP, CAUCHY_CLAMP)
        return self.loc + self.scale * rng.standard_normal(size)


DEFAULT_PRIORS = {
    "variance": HyperPrior(PriorFamily.LOGNORMAL, 0.0, 1.0, "variance"),
    "lengthscale": HyperPrior(PriorFamily.LOGNORMAL, 0.0, 1.0, "lengthscale"),
    "period": HyperPrior(PriorFamily.LOGNORMAL, 0.0, 1.0, "period"),
    "variances": HyperPrior(PriorFamily.LOGNORMAL, 0.0, 1.0, "variances"),
    "cos_lengthscale": HyperPrior(PriorFamily.CAUCHY, 0.0, 5.0, "cos_lengthscale"),
    "shift": HyperPrior(PriorFamily.CAUCHY, 0.0, 5.0, "shift"),
    "noise": HyperPrior(PriorFamily.LOGNORMAL, 0.0, 1.0, "noise"),
}


def lognormal_sum_approx(mus, sigma2s) -> tuple[float, float]:
    """Moment-matched lognormal ``(mu_z, sigma2_z)`` for a sum of lognormals."""
    mus = np.asarray(mus, dtype=float)
    sigma2s = np.asarray(sigma2s, dtype=float)
    mean_terms = np.exp(mus + sigma2s / 2)
    var_terms = np.exp(2 * mus + sigma2s) * np.expm1(sigma2s)
    sigma2_z = math.log(var_terms.sum() / mean_terms.sum() ** 2 + 1.0)
    mu_z = math.log(mean_terms.sum()) - sigma2_z / 2
    return mu_z, sigma2_z


def implied_lengthscale(lengthscales) -> np.ndarray:
    """Lengthscale of a product of RBFs, ``(sum_i l_i^-2)^-1/2`` along the last axis."""
    ls = np.asarray(lengthscales, dtype=float)
    return 1.0 / np.sqrt(np.sum(ls ** -2.0, axis=-1))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(160)


def _inverse_square_sum_cdf(log_a: np.ndarray, m: int, s: float) -> np.ndarray:
    """``P(sum_{i<=m} exp(-2 s z_i) <= exp(log_a))`` for iid standard normal z."""
    log_a = np.asarray(log_a, dtype=float)
    if m == 1:
        return stats.norm.cdf(log_a / (2 * s))
    # integrate over the first summand's z on [z0, z0 + 12]
    z0 = -log_a / (2 * s)
    half = 6.0
    z = z0[..., None] + half * (_GL_NODES + 1.0)
    rest = np.exp(log_a)[..., None] - np.exp(-2 * s * z)
    inner = np.zeros_like(rest)
    ok = rest > 0
    inner[ok] = _inverse_square_sum_cdf(np.log(rest[ok]), m - 1, s)
    return half * (stats.norm.pdf(z) * inner) @ _GL_WEIGHTS


@functools.lru_cache(maxsize=64)
def _median_log_inverse_square_sum(n: int, s: float) -> float:
    """Median of ``log sum_i exp(-2 s z_i)`` for iid standard normal ``z_i``.

    Computed by quadrature of the CDF, so it stays independent of any
    sampling based check.
    """
    lo, hi = math.log(n) - 12 * s - 1, math.log(n) + 12 * s + 1
    return optimize.brentq(lambda t: float(_inverse_square_sum_cdf(np.array([t]), n, s)[0]) - 0.5,
                           lo, hi, xtol=1e-10)


def shrinkage_correction(n_factors: int, base_prior: HyperPrior) -> HyperPrior:
    """Per-factor lengthscale prior for a product of ``n_factors`` stationary factors.

    Multiplying kernels shrinks the implied lengthscale
    (``1/l^2 = sum_i 1/l_i^2`` for Gaussian spectra).  The returned lognormal
    prior is widened so the lognormal approximation of the implied lengthscale
    has the base prior's log-spread, and shifted so that its median equals the
    base prior's median.
    """
    if n_factors not in (2, 3):
        raise KernelError(f"shrinkage correction defined for 2 or 3 factors, got {n_factors}")
    if base_prior.family is not PriorFamily.LOGNORMAL:
        raise KernelError("shrinkage correction needs a lognormal base prior")
    mu0, s0 = base_prior.loc, base_prior.scale
    # sum of n iid LN(m, 4 s^2) inverse squares: sigma2_z = log((e^{4s^2}-1)/n + 1).
    # Require the implied log-variance sigma2_z / 4 to equal s0^2.
    s2 = math.log(n_factors * math.expm1(4 * s0 ** 2) + 1.0) / 4
    s = math.sqrt(s2)
    if s == 0.0:
        mu = mu0 + 0.5 * math.log(n_factors)
    else:
        # log implied = mu - 0.5 * log sum exp(-2 s z_i); match medians
        mu = mu0 + 0.5 * _median_log_inverse_square_sum(n_factors, s)
    return HyperPrior(PriorFamily.LOGNORMAL, mu, s, base_prior.target)


# ---------------------------------------------------------------------------
# expressions


@dataclass
class Term:
    """One product token with bound hyperparameters.

    ``params[i]`` maps parameter names of factor ``i`` to length-D arrays.
    """

    factors: tuple[str, ...]
    variance: float = 1.0
    params: list[dict[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        factors = tuple(self.factors)
        if not 1 <= len(factors) <= 3:
            raise KernelError("a product term has one to three factors")
        for k in factors:
            if k not in PRIMITIVES:
                raise KernelError(f"unknown primitive kernel {k!r}")
        if not self.params:
            self.params = [{} for _ in factors]
        order = sorted(range(len(factors)), key=lambda i: factors[i])
        self.factors = tuple(factors[i] for i in order)
        self.params = [dict(self.params[i]) for i in order]

    @property
    def name(self) -> str:
        return "*".join(self.factors)

    @property
    def n_dims(self):
        for p in self.params:
            for v in p.values():
                return len(v)
        return None

    def copy(self) -> Term:
        return Term(self.factors, float(self.variance),
                    [{k: np.array(v, dtype=float) for k, v in p.items()} for p in self.params])

    def validate(self):
        if not self.variance > 0:
            raise KernelError(f"{self.name}: variance must be positive")
        for kind, p in zip(self.factors, self.params):
            for pname, transform in SHAPE_PARAMS[kind]:
                if pname not in p:
                    raise KernelError(f"{self.name}: missing {kind}.{pname}")
                v = np.asarray(p[pname])
                if not np.all(np.isfinite(v)):
                    raise KernelError(f"{self.name}: non-finite {kind}.{pname}")
                if transform == "log" and np.any(v <= 0):
                    raise KernelError(f"{self.name}: {kind}.{pname} must be positive")
                if kind == "COS" and np.any(v == 0):
                    raise KernelError(f"{self.name}: COS lengthscale must be nonzero")


@dataclass
class Expression:
    """A sum of product terms."""

    terms: list[Term] = field(default_factory=list)
    max_terms: int = 3

    @property
    def token_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.terms)

    @property
    def canonical_key(self) -> tuple[str, ...]:
        return tuple(sorted(self.token_names))

    def sorted_terms(self) -> list[Term]:
        """Terms by variance descending, ties alphabetical by name."""
        return sorted(self.terms, key=lambda t: (-t.variance, t.name))

    def __str__(self) -> str:
        return to_text(self)

    def copy(self) -> Expression:
        return Expression([t.copy() for t in self.terms], self.max_terms)

    # -- unconstrained vector ------------------------------------------------
    def param_layout(self) -> list[tuple[str, str, int]]:
        """``(key, transform, size)`` in vector order."""
        layout = []
        for ti, term in enumerate(self.terms):
            layout.append((f"{ti}.variance", "log", 1))
            for fi, kind in enumerate(term.factors):
                for pname, transform in SHAPE_PARAMS[kind]:
                    size = len(term.params[fi][pname])
                    layout.append((f"{ti}.{fi}.{kind}.{pname}", transform, size))
        return layout

    def n_params(self) -> int:
        return sum(size for _, _, size in self.param_layout())

    def to_vector(self) -> np.ndarray:
        out = []
        for term in self.terms:
            out.append([math.log(term.variance)])
            for kind, p in zip(term.factors, term.params):
                for pname, transform in SHAPE_PARAMS[kind]:
                    v = np.asarray(p[pname], dtype=float)
                    out.append(np.log(v) if transform == "log" else v)
        return np.concatenate(out) if out else np.zeros(0)

    def with_vector(self, theta) -> Expression:
        theta = np.asarray(theta, dtype=float)
        new, i = self.copy(), 0
        for term in new.terms:
            term.variance = float(np.exp(theta[i]))
            i += 1
            for kind, p in zip(term.factors, term.params):
                for pname, transform in SHAPE_PARAMS[kind]:
                    size = len(p[pname])
                    v = theta[i:i + size]
                    p[pname] = np.exp(v) if transform == "log" else v.copy()
                    i += size
        if i != len(theta):
            raise KernelError(f"vector length {len(theta)} does not match {i} parameters")
        return new

    def hyperparameters(self) -> dict[str, list[float] | float]:
        """Flat key-value map that round-trips with :func:`from_text`."""
        out: dict[str, list[float] | float] = {}
        for ti, term in enumerate(self.terms):
            out[f"{ti}.variance"] = float(term.variance)
            for fi, (kind, p) in enumerate(zip(term.factors, term.params)):
                for pname, _ in SHAPE_PARAMS[kind]:
                    out[f"{ti}.{fi}.{kind}.{pname}"] = [float(v) for v in p[pname]]
        return out


def to_text(expr: Expression) -> str:
    """Canonical text, e.g. ``LIN*NOISE + RBF + PER`` (variance descending)."""
    return " + ".join(t.name for t in expr.sorted_terms())


def from_text(text: str, hyperparameters: dict | None = None, n_dims: int | None = None) -> Expression:
    """Parse canonical text; hyperparameters keyed as in :meth:`Expression.hyperparameters`."""
    text = text.strip()
    names = [s.strip() for s in text.split("+")] if text else []
    terms = []
    for name in names:
        factors = tuple(f.strip() for f in name.split("*"))
        terms.append(Term(factors))
    expr = Expression(terms, max_terms=max(3, len(terms)))
    if hyperparameters is None:
        if n_dims is None:
            raise KernelError("need hyperparameters or n_dims")
        for term in expr.terms:
            for kind, p in zip(term.factors, term.params):
                for pname, _ in SHAPE_PARAMS[kind]:
                    p[pname] = np.ones(n_dims) if pname != "shift" else np.zeros(n_dims)
        return expr
    for ti, term in enumerate(expr.terms):
        term.variance = float(hyperparameters[f"{ti}.variance"])
        for fi, (kind, p) in enumerate(zip(term.factors, term.params)):
            for pname, _ in SHAPE_PARAMS[kind]:
                key = f"{ti}.{fi}.{kind}.{pname}"
                if key not in hyperparameters:
                    raise KernelError(f"missing hyperparameter {key}")
                p[pname] = np.asarray(hyperparameters[key], dtype=float)
    return expr


# ---------------------------------------------------------------------------
# sampling


def sample_term(factors, n_dims: int, rng: np.random.Generator, priors=None) -> Term:
    """Draw a product token's hyperparameters from their priors.

    Lognormal lengthscales of products with two or three stationary factors
    are drawn from the shrinkage-corrected prior.
    """
    if n_dims < 1:
        raise KernelError("n_dims must be >= 1")
    priors = DEFAULT_PRIORS if priors is None else {**DEFAULT_PRIORS, **priors}
    factors = tuple(sorted(factors))
    n_ls = sum(k in LOGNORMAL_LENGTHSCALE for k in factors)
    ls_prior = priors["lengthscale"]
    if n_ls in (2, 3):
        ls_prior = shrinkage_correction(n_ls, ls_prior)
    variance = float(priors["variance"].sample(rng))
    params = []
    for kind in factors:
        p = {}
        for pname, _ in SHAPE_PARAMS[kind]:
            if kind == "COS":
                prior = priors["cos_lengthscale"]
            elif pname == "lengthscale":
                prior = ls_prior
            else:
                prior = priors[pname]
            v = np.asarray(prior.sample(rng, n_dims), dtype=float)
            if kind == "COS":
                v[v == 0.0] = 1e-12
            p[pname] = v
        params.append(p)
    return Term(factors, variance, params)


def sample_hyperparameters(token, n_dims: int, rng: np.random.Generator, priors=None) -> Term:
    """Alias taking a token name (``"LIN*NOISE"``) or a tuple of factor kinds."""
    factors = tuple(token.split("*")) if isinstance(token, str) else tuple(token)
    return sample_term(factors, n_dims, rng, priors)


def sample_expression(tokens, n_dims: int, rng: np.random.Generator, priors=None) -> Expression:
    return Expression([sample_hyperparameters(t, n_dims, rng, priors) for t in tokens],
                      max_terms=max(3, len(tokens)))


# ---------------------------------------------------------------------------
# evaluation


def _sq_dist_scaled(X, X2, ls):
    # direct differences per dimension: the expanded a^2 + b^2 - 2ab form
    # loses ~1e-8 near zero distance after the Matern square root
    r2 = np.zeros((X.shape[0], X2.shape[0]))
    for d in range(X.shape[1]):
        r2 += ((X[:, d][:, None] - X2[:, d][None, :]) / ls[d]) ** 2
    return r2


def _factor(kind, p, X, X2, same, want_grad):
    """Matrix of one factor plus derivatives w.r.t. its unconstrained params."""
    n, m = X.shape[0], X2.shape[0]
    grads = []
    if kind == "NOISE":
        return same.astype(float), grads
    if kind == "LIN":
        var, c = p["variances"], p["shift"]
        A, B = X - c, X2 - c
        F = (A * var) @ B.T
        if want_grad:
            for d in range(X.shape[1]):
                grads.append(var[d] * np.outer(A[:, d], B[:, d]))
            for d in range(X.shape[1]):
                grads.append(-var[d] * (A[:, d][:, None] + B[:, d][None, :]))
        return F, grads
    if kind == "COS":
        ls = p["lengthscale"]
        s = (X / ls).sum(1)[:, None] - (X2 / ls).sum(1)[None, :]
        F = np.cos(s)
        if want_grad:
            sin_s = np.sin(s)
            for d in range(X.shape[1]):
                diff = X[:, d][:, None] - X2[:, d][None, :]
                grads.append(sin_s * diff / ls[d] ** 2)
        return F, grads
    if kind == "PER":
        ls, per = p["lengthscale"], p["period"]
        F = np.ones((n, m))
        sins, us = [], []
        for d in range(X.shape[1]):
            u = np.pi * (X[:, d][:, None] - X2[:, d][None, :]) / per[d]
            sn = np.sin(u)
            F *= np.exp(-2.0 * sn ** 2 / ls[d] ** 2)
            if want_grad:
                sins.append(sn)
                us.append(u)
        if want_grad:
            for d in range(X.shape[1]):
                grads.append(F * 4.0 * sins[d] ** 2 / ls[d] ** 2)
            for d in range(X.shape[1]):
                grads.append(F * 2.0 * np.sin(2 * us[d]) * us[d] / ls[d] ** 2)
        return F, grads

    ls = p["lengthscale"]
    r2 = _sq_dist_scaled(X, X2, ls)
    if kind == "RBF":
        F = np.exp(-0.5 * r2)
        dF_scale = F  # dF/dlog l_d = F * diff_d^2 / l_d^2
    else:
        r = np.sqrt(r2)
        if kind == "M12":
            F = np.exp(-r)
            with np.errstate(divide="ignore", invalid="ignore"):
                dF_scale = np.where(r > 0, F / r, 0.0)
        elif kind == "M32":
            e = np.exp(-math.sqrt(3) * r)
            F = (1 + math.sqrt(3) * r) * e
            dF_scale = 3.0 * e
        elif kind == "M52":
            e = np.exp(-math.sqrt(5) * r)
            F = (1 + math.sqrt(5) * r + 5.0 / 3.0 * r2) * e
            dF_scale = 5.0 / 3.0 * (1 + math.sqrt(5) * r) * e
        else:
            raise KernelError(f"unknown kind {kind}")
    if want_grad:
        for d in range(X.shape[1]):
            diff2 = (X[:, d][:, None] - X2[:, d][None, :]) ** 2 / ls[d] ** 2
            grads.append(dF_scale * diff2)
    return F, grads


def _check_inputs(expr, X, X2):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = X if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != X2.shape[1]:
        raise KernelError(f"dimension mismatch: {X.shape[1]} vs {X2.shape[1]}")
    for term in expr.terms:
        term.validate()
        d = term.n_dims
        if d is not None and d != X.shape[1]:
            raise KernelError(f"{term.name} has {d}-dim parameters, data has {X.shape[1]} dims")
    return X, X2


def _canonical_order(terms):
    # fixed summation order makes the result bitwise independent of term order
    return sorted(terms, key=lambda t: (t.name, t.variance))


def eval_kernel(expr: Expression, X, X2=None, same=None) -> np.ndarray:
    """Covariance matrix ``k(X, X2)`` summed over terms.

    ``same`` is an N x M boolean mask of row pairs that are the same
    observation; white noise contributes only there.  It defaults to the
    identity when ``X2`` is omitted and to all-False otherwise.
    """
    X_in, X2_in = X, X2
    X, X2 = _check_inputs(expr, X, X2)
    if same is None:
        same = np.eye(X.shape[0], dtype=bool) if X2_in is None else np.zeros((X.shape[0], X2.shape[0]), bool)
    K = np.zeros((X.shape[0], X2.shape[0]))
    for term in _canonical_order(expr.terms):
        Kt = np.full_like(K, term.variance)
        for kind, p in zip(term.factors, term.params):
            F, _ = _factor(kind, p, X, X2, same, False)
            Kt *= F
        K += Kt
    return K


def eval_kernel_diag(expr: Expression, X) -> np.ndarray:
    """Diagonal of ``k(X, X)`` (each row paired with itself)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.zeros(X.shape[0])
    for term in _canonical_order(expr.terms):
        term.validate()
        v = np.full(X.shape[0], term.variance)
        for kind, p in zip(term.factors, term.params):
            if kind == "LIN":
                v = v * ((X - p["shift"]) ** 2 * p["variances"]).sum(1)
            # every other factor is exactly one on the diagonal
        out += v
    return out


def kernel_and_grads(expr: Expression, X) -> tuple[np.ndarray, list[np.ndarray]]:
    """``K(X, X)`` and its derivatives w.r.t. :meth:`Expression.to_vector`."""
    X, _ = _check_inputs(expr, X, None)
    same = np.eye(X.shape[0], dtype=bool)
    n = X.shape[0]
    K = np.zeros((n, n))
    all_grads = []
    for term in expr.terms:
        mats, fgrads = [], []
        for kind, p in zip(term.factors, term.params):
            F, g = _factor(kind, p, X, X, same, True)
            mats.append(F)
            fgrads.append(g)
        prod = np.full((n, n), term.variance)
        for F in mats:
            prod = prod * F
        K += prod
        all_grads.append(prod)
        for i, g in enumerate(fgrads):
            others = np.full((n, n), term.variance)
            for j, F in enumerate(mats):
                if j != i:
                    others = others * F
            all_grads.extend(others * dF for dF in g)
    return K, all_grads
