"""Weibull regression for right-censored event times.

Parameterisation: ``S(t | V) = exp(-(t / scale(V)) ** k)`` with
``scale(V) = exp(gamma . [1, V])``. Fitting works on ``(log k, gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    """Optimizer failed; carries the last iterate and its gradient norm."""

    def __init__(self, message, params=None, grad_norm=None, trace=None):
        super().__init__(message)
        self.params = params
        self.grad_norm = grad_norm
        self.trace = trace or []


class FitError(ValueError):
    """Data cannot support the requested fit (no events, rank deficiency...)."""


def _design(V, n):
    V = np.zeros((n, 0)) if V is None else np.asarray(V, dtype=float).reshape(n, -1)
    return np.column_stack([np.ones(n), V])


@dataclass(frozen=True)
class WeibullModel:
    shape: float
    coefficients: np.ndarray
    covariate_names: tuple = ()
    loglik: float = math.nan
    n_iter: int = 0

    def __post_init__(self):
        if not self.shape > 0:
            raise ValueError("Weibull shape must be positive")
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float))

    def scale(self, V=None):
        V = np.atleast_2d(np.zeros((1, len(self.coefficients) - 1)) if V is None else V)
        if V.shape[1] != len(self.coefficients) - 1:
            V = V.reshape(-1, len(self.coefficients) - 1)
        return np.exp(self.coefficients[0] + V @ self.coefficients[1:])

    def _scale1(self, V):
        if V is None:
            V = np.zeros(len(self.coefficients) - 1)
        return math.exp(self.coefficients[0] + float(np.dot(self.coefficients[1:], V)))

    def cumulative_hazard(self, t, V=None):
        return (np.asarray(t, dtype=float) / self._scale1(V)) ** self.shape

    def survival(self, t, V=None):
        return survival_probability(self, t, V)

    def density(self, t, V=None):
        return event_density(self, t, V)

    def log_density(self, t, V=None):
        t = np.asarray(t, dtype=float)
        lam = self._scale1(V)
        k = self.shape
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.log(t / lam)
            out = np.log(k / lam) + (k - 1.0) * z - np.exp(k * z)
        # at t = 0 the density is 0 (k > 1), 1/lam (k = 1) or unbounded (k < 1)
        at0 = t <= 0
        if np.any(at0):
            edge = -np.inf if k > 1 else (np.log(k / lam) if k == 1 else np.inf)
            out = np.where(at0, edge, out)
        return out

    def quantile(self, p, V=None):
        """Time at which the CDF reaches ``p``."""
        return self._scale1(V) * (-np.log1p(-np.asarray(p, dtype=float))) ** (1.0 / self.shape)

    def survival_quantile(self, surv, V=None):
        """Time ``t`` with ``S(t) = surv``."""
        return self._scale1(V) * (-np.log(np.asarray(surv, dtype=float))) ** (1.0 / self.shape)

    @property
    def params(self):
        return np.concatenate([[self.shape], self.coefficients])

    def param_names(self):
        return ["shape", "log_scale[intercept]",
                *(f"log_scale[{c}]" for c in self.covariate_names)]

    def to_json(self):
        return {"shape": self.shape, "coefficients": self.coefficients.tolist(),
                "covariate_names": list(self.covariate_names), "loglik": self.loglik}

    @classmethod
    def from_json(cls, d):
        return cls(float(d["shape"]), np.array(d["coefficients"], dtype=float),
                   tuple(d.get("covariate_names", ())), float(d.get("loglik", math.nan)))


def survival_probability(m: WeibullModel, t, V=None):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("survival_probability needs t >= 0")
    return np.exp(-m.cumulative_hazard(t, V))


def event_density(m: WeibullModel, t, V=None):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("event_density needs t > 0")
    return np.exp(m.log_density(t, V))


def sample_event_time(m: WeibullModel, V=None, rng=None, size=None):
    """Inverse-CDF draw(s). ``V`` may be a single row or an (n, p) matrix."""
    rng = np.random.default_rng(rng)
    if V is not None and np.ndim(V) == 2:
        lam = np.exp(m.coefficients[0] + np.asarray(V) @ m.coefficients[1:])
        size = len(lam)
    else:
        lam = m._scale1(V)
    u = rng.random(size)
    return lam * (-np.log1p(-u)) ** (1.0 / m.shape)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def weibull_loglik(theta, T, delta, X):
    """Log-likelihood, gradient and Hessian in ``theta = (log k, gamma)``."""
    rho, gamma = theta[0], theta[1:]
    k = math.exp(rho)
    z = np.log(T) - X @ gamma
    w = np.exp(k * z)
    ll = float(np.sum(delta * (rho - np.log(T) + k * z) - w))
    gg = k * (X.T @ (w - delta))
    gr = float(np.sum(delta * (1 + k * z) - k * z * w))
    grad = np.concatenate([[gr], gg])
    hgg = -(k * k) * (X.T * w) @ X
    hgr = X.T @ (k * (w - delta) + k * k * z * w)
    hrr = float(np.sum(k * z * (delta - w) - (k * z) ** 2 * w))
    p = len(theta)
    H = np.empty((p, p))
    H[0, 0] = hrr
    H[0, 1:] = H[1:, 0] = hgr
    H[1:, 1:] = hgg
    return ll, grad, H


def fit_weibull(T, delta, V=None, covariate_names=(), tol=1e-8, max_iter=200) -> WeibullModel:
    """Right-censored Weibull MLE by damped Newton.

    Falls back to a gradient step with backtracking when the Hessian is not
    negative definite. Convergence: ``max|grad| <= tol * max(1, |loglik|)``.
    """
    T = np.asarray(T, dtype=float)
    delta = np.asarray(delta, dtype=float)
    n = len(T)
    X = _design(V, n)
    if delta.sum() < 1:
        raise FitError("no observed events; survival model is not estimable")
    if np.any(T <= 0):
        raise FitError("observed times must be positive")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise FitError("survival design matrix is rank deficient")
    # Newton runs on centred, unit-variance columns; mapped back on return
    mu = X[:, 1:].mean(0)
    sd = X[:, 1:].std(0)
    const = sd < 1e-12
    mu[const] = 0.0
    sd[const] = 1.0
    X = np.column_stack([X[:, 0], (X[:, 1:] - mu) / sd])
    # exponential start: closed-form intercept
    theta = np.zeros(X.shape[1] + 1)
    theta[1] = math.log(T.sum() / delta.sum())
    ll, g, H = weibull_loglik(theta, T, delta, X)
    trace = []
    for it in range(1, max_iter + 1):
        try:
            L = np.linalg.cholesky(-H)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            step = g / max(1.0, np.abs(g).max())
        t = 1.0
        while True:
            cand = theta + t * step
            ll_new, g_new, H_new = weibull_loglik(cand, T, delta, X)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("Weibull line search failed", theta,
                                       float(np.abs(g).max()), trace)
        theta, ll, g, H = cand, ll_new, g_new, H_new
        gn = float(np.abs(g).max())
        trace.append((it, ll, gn))
        if gn <= tol * max(1.0, abs(ll)):
            beta = theta[1:].copy()
            beta[1:] /= sd
            beta[0] -= float(beta[1:] @ mu)
            return WeibullModel(math.exp(theta[0]), beta, tuple(covariate_names), ll, it)
    raise ConvergenceError(f"Weibull fit did not converge in {max_iter} iterations", theta,
                           float(np.abs(g).max()), trace)


def fit_parametric_survival(ds) -> WeibullModel:
    """Layer-0 model: Weibull regression of the event time on baseline covariates."""
    return fit_weibull(ds.T, ds.delta, ds.V, ds.covariate_names)
