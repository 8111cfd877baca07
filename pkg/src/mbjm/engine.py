"""Multi-layer backward joint model: fitting and dynamic risk prediction.

The joint distribution of biomarkers and event time given baseline
covariates factorises as

    P(T | V) * prod_m P(Y_m | Y_1 .. Y_{m-1}, T, V)

Layer 0 is a Weibull regression fitted on all subjects. Layer ``m`` is a
linear or logistic mixed model of biomarker ``m`` with the event time
entering through ``g(T)``, fitted on the complete cases (subjects with an
observed event, plus long-term survivors for the two-part variant).

The risk of an event in ``(s, s + horizon]`` for a subject still at risk at
``s`` is a ratio of one-dimensional integrals over the unknown event time.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import (BiomarkerSpec, DataError, IntegrationSettings, LongitudinalDataset,
                   ModelConfig, G_TRANSFORMS)
from .mixed import (GlmmFit, LayerDesign, LmmFit, aghq_loglik, fit_glmm, fit_lmm,
                    group_starts, layer_fit_from_json, lmm_group_loglik, _omega_factor)
from .survival import WeibullModel, fit_parametric_survival


class LayerFitError(RuntimeError):
    def __init__(self, layer, name, cause):
        super().__init__(f"layer {layer} ({name}): {cause}")
        self.layer = layer
        self.biomarker = name
        self.cause = cause


class PredictionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


@dataclass
class FittedMbjm:
    survival: WeibullModel
    layers: list
    config: ModelConfig
    biomarkers: tuple
    covariate_names: tuple
    lts_layers: list | None = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) != len(self.biomarkers):
            raise ValueError("one layer fit per biomarker is required")
        if self.config.variant == "TP" and self.lts_layers is None:
            raise ValueError("TP model needs long-term-survivor layers")
        if self.config.variant == "EX" and self.lts_layers is not None:
            raise ValueError("EX model has no long-term-survivor layers")

    @property
    def n_layers(self):
        return len(self.layers)

    def g(self, u):
        return G_TRANSFORMS[self.config.g_transform](u)

    # parameter vector ------------------------------------------------------
    def param_table(self):
        """``(names, values)`` grouped as survival, layers, LTS layers, variances."""
        names = list(self.survival.param_names())
        vals = list(self.survival.params)
        groups = [("layer", self.layers)]
        if self.lts_layers is not None:
            groups.append(("lts", self.lts_layers))
        for tag, fits in groups:
            for m, f in enumerate(fits, start=1):
                for c, b in zip(f.design.column_names, f.beta):
                    names.append(f"{tag}{m}:{f.design.biomarker}:beta[{c}]")
                    vals.append(float(b))
        for tag, fits in groups:
            for m, f in enumerate(fits, start=1):
                vn, vv = f.variance_params()
                names.extend(f"{tag}{m}:{f.design.biomarker}:{n}" for n in vn)
                vals.extend(vv)
        return names, np.array(vals)

    def param_vector(self):
        return self.param_table()[1]

    # serialisation ---------------------------------------------------------
    def to_json(self):
        return {
            "model": "MBJM-" + self.config.variant,
            "config": self.config.to_json(),
            "covariate_names": list(self.covariate_names),
            "biomarkers": [b.to_json() for b in self.biomarkers],
            "survival": self.survival.to_json(),
            "layers": [f.to_json() for f in self.layers],
            "lts_layers": None if self.lts_layers is None else [f.to_json() for f in self.lts_layers],
            "report": self.report,
        }

    @classmethod
    def from_json(cls, d):
        return cls(WeibullModel.from_json(d["survival"]),
                   [layer_fit_from_json(x) for x in d["layers"]],
                   ModelConfig.from_json(d["config"]),
                   tuple(BiomarkerSpec.from_json(b) for b in d["biomarkers"]),
                   tuple(d["covariate_names"]),
                   None if d.get("lts_layers") is None else [layer_fit_from_json(x)
                                                            for x in d["lts_layers"]],
                   d.get("report", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class RiskQuery:
    """History of one subject up to the prediction time ``s``."""

    V: np.ndarray
    times: np.ndarray
    values: np.ndarray
    s: float
    horizon: float

    def __post_init__(self):
        V = np.atleast_1d(np.asarray(self.V, dtype=float))
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        y = np.asarray(self.values, dtype=float).reshape(len(t), -1) if len(t) else \
            np.zeros((0, np.shape(self.values)[-1] if np.ndim(self.values) == 2 else 0))
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        if not self.horizon > 0:
            raise PredictionError("horizon must be positive")
        if len(t) and t.max() > self.s + 1e-12:
            raise PredictionError("history contains visits after the prediction time")


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnifiedGroup:
    index: np.ndarray
    non_lts: np.ndarray
    lts: np.ndarray


def select_unified_group(ds: LongitudinalDataset, config: ModelConfig) -> UnifiedGroup:
    """Complete-case subjects: ``Delta_i = 1 - (1 - delta_i) 1{T_i < tau_max}``."""
    tau = config.tau_max
    T, d = ds.T, ds.delta
    unified = (d == 1) | (T >= tau)
    if config.variant == "EX":
        non_lts = unified
        lts = np.zeros_like(unified)
    else:
        lts = unified & ((T > tau) | ((d == 0) & (T >= tau)))
        non_lts = unified & ~lts
    if not unified.any():
        raise DataError("unified group is empty: no events and nobody followed to tau_max")
    return UnifiedGroup(np.flatnonzero(unified), np.flatnonzero(non_lts), np.flatnonzero(lts))


def layer_designs(biomarkers: Sequence[BiomarkerSpec], covariate_names, config: ModelConfig,
                  include_g=True):
    out = []
    for m, b in enumerate(biomarkers):
        out.append(LayerDesign(b.name, b.kind, tuple(covariate_names),
                               tuple(x.name for x in biomarkers[:m]), include_g,
                               config.g_transform, config.random_effects))
    return out


def layer_rows(ds: LongitudinalDataset, subjects, m, design: LayerDesign, g):
    """Design matrices for layer ``m`` (0-based) over ``subjects``.

    Rows with a missing outcome or a missing lower-layer value are dropped.
    """
    mask = np.isin(ds.visit_subject, subjects)
    mask &= np.all(np.isfinite(ds.Y[:, :m + 1]), axis=1)
    rows = np.flatnonzero(mask)
    subj = ds.visit_subject[rows]
    gT = g(ds.T[subj]) if design.include_g else None
    X, Z = design.build(ds.visit_time[rows], ds.V[subj], ds.Y[rows, :m], gT)
    return X, Z, ds.Y[rows, m], subj


def _fit_layer(ds, subjects, m, design, config, g):
    X, Z, y, groups = layer_rows(ds, subjects, m, design, g)
    try:
        if design.kind == "categorical":
            return fit_glmm(X, Z, y, groups, design, Q=config.quadrature_nodes)
        return fit_lmm(X, Z, y, groups, design)
    except Exception as e:  # noqa: BLE001 - re-raised with the layer tag
        raise LayerFitError(m + 1, design.biomarker, e) from e


def fit_mbjm(ds: LongitudinalDataset, config: ModelConfig, threads: int = 1) -> FittedMbjm:
    """Two-step complete-case estimation of the MBJM."""
    survival = fit_parametric_survival(ds)
    group = select_unified_group(ds, config)
    g = G_TRANSFORMS[config.g_transform]
    M = ds.n_biomarkers
    designs = layer_designs(ds.biomarkers, ds.covariate_names, config, include_g=True)
    jobs = [(group.non_lts, m, designs[m]) for m in range(M)]
    if config.variant == "TP":
        if len(group.lts) < 2 and M:
            raise DataError("two-part model needs at least two long-term survivors")
        lts_designs = layer_designs(ds.biomarkers, ds.covariate_names, config, include_g=False)
        jobs += [(group.lts, m, lts_designs[m]) for m in range(M)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as ex:
            fits = list(ex.map(lambda j: _fit_layer(ds, j[0], j[1], j[2], config, g), jobs))
    else:
        fits = [_fit_layer(ds, s, m, d, config, g) for s, m, d in jobs]
    layers = fits[:M]
    lts = fits[M:] if config.variant == "TP" else None
    report = {
        "n_subjects": ds.n_subjects,
        "n_events": ds.n_events,
        "unified_group": int(len(group.index)),
        "non_lts": int(len(group.non_lts)),
        "lts": int(len(group.lts)),
        "survival_iterations": survival.n_iter,
        "layers": [{"layer": k + 1, "biomarker": f.design.biomarker, "kind": f.kind,
                    "lts": k >= M, "n_groups": f.n_groups, "n_obs": f.n_obs,
                    "iterations": f.n_iter, "converged": f.converged, "loglik": f.loglik,
                    "notes": list(f.notes)} for k, f in enumerate(fits)],
    }
    return FittedMbjm(survival, layers, config, ds.biomarkers, ds.covariate_names, lts, report)


# ---------------------------------------------------------------------------
# trajectory likelihood
# ---------------------------------------------------------------------------


class _LayerLik:
    """Log-likelihood of one layer's history as a function of the g(T) shift."""

    def __init__(self, fit, t, V, Yprev, y):
        d = fit.design
        self.fit = fit
        n = len(t)
        Vr = np.broadcast_to(V, (n, len(V)))
        if d.include_g:
            X, Z = d.build(t, Vr, Yprev, np.zeros(n))
            self.coef_g = float(fit.beta[-1])
        else:
            X, Z = d.build(t, Vr, Yprev)
            self.coef_g = 0.0
        self.eta0 = X @ fit.beta
        self.Z = Z
        self.y = y
        self.n = n
        if fit.kind == "continuous":
            r0 = y - self.eta0
            one = np.ones(n)
            V_ = fit.sigma2 * np.eye(n) + Z @ fit.omega @ Z.T
            c = np.linalg.cholesky(V_)
            w_r = np.linalg.solve(c, r0)
            w_1 = np.linalg.solve(c, one)
            self.a = float(w_1 @ w_1)
            self.b = float(w_1 @ w_r)
            self.c = float(w_r @ w_r)
            self.const = -0.5 * (n * math.log(2 * math.pi) + 2 * np.log(np.diag(c)).sum())
        else:
            self.L = _omega_factor(fit.omega)
            self.Q = fit.quadrature_nodes

    def __call__(self, gu):
        gu = np.atleast_1d(np.asarray(gu, dtype=float))
        shift = self.coef_g * gu
        if self.fit.kind == "continuous":
            return self.const - 0.5 * (self.c - 2 * shift * self.b + shift ** 2 * self.a)
        if self.coef_g == 0.0:
            return np.full(gu.shape, self._glmm(np.zeros(1))[0])
        return self._glmm(shift)

    def _glmm(self, shift):
        if self.Z.shape[1] == 1:
            return self._glmm_intercept(shift)
        K = len(shift)
        n = self.n
        eta = (self.eta0[None, :] + shift[:, None]).ravel()
        Z = np.tile(self.Z, (K, 1))
        y = np.tile(self.y, K)
        starts = np.arange(K, dtype=np.int64) * n
        ll, _, _ = aghq_loglik(np.ones(1), self.L, eta[:, None], Z, y, starts, self.Q)
        return ll

    def _glmm_intercept(self, shift):
        # random intercept: the marginal is a Gaussian convolution of the
        # summed Bernoulli log-likelihood, evaluated by trapezoid on a grid
        # fine enough to resolve the narrowest possible posterior (the
        # trapezoid error for a Gaussian of width sd at step sd/2 is ~e^-79)
        w = math.sqrt(float(self.fit.omega[0, 0]))
        if w == 0.0:
            eta = self.eta0[None, :] + shift[:, None]
            return np.sum(self.y * eta - np.logaddexp(0.0, eta), axis=1)
        sd = 1.0 / math.sqrt(1.0 / w ** 2 + self.n / 4.0)
        lo, hi = shift.min() - 12 * w, shift.max() + 12 * w
        G = int(min(max(np.ceil((hi - lo) / (sd / 2)), 32), 20000)) + 1
        c = np.linspace(lo, hi, G)
        eta = self.eta0[None, :] + c[:, None]
        h = np.sum(self.y * eta - np.logaddexp(0.0, eta), axis=1)
        step = c[1] - c[0]
        logk = -0.5 * ((c[None, :] - shift[:, None]) / w) ** 2
        logk += math.log(step) - 0.5 * math.log(2 * math.pi) - math.log(w)
        return _lse_rows(logk + h[None, :])


def _lse_rows(a):
    m = a.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


class TrajectoryLikelihood:
    """``u -> log P(history | T = u, V)`` for one query, layer terms cached."""

    def __init__(self, model: FittedMbjm, query: RiskQuery, lts=False):
        self.model = model
        fits = model.lts_layers if lts else model.layers
        t, Y = query.times, query.values
        self.terms = []
        if len(t) == 0 or model.n_layers == 0:
            return
        if Y.shape[1] != model.n_layers:
            raise PredictionError(f"query has {Y.shape[1]} biomarkers, model has {model.n_layers}")
        if not np.all(np.isfinite(Y)):
            raise PredictionError("prediction requires complete visit rows (missing values found)")
        for m, f in enumerate(fits):
            self.terms.append(_LayerLik(f, t, query.V, Y[:, :m], Y[:, m]))

    def __call__(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if not self.terms:
            return np.zeros(u.shape)
        gu = self.model.g(u)
        return sum(term(gu) for term in self.terms)

    def per_layer(self, u):
        gu = self.model.g(np.atleast_1d(np.asarray(u, dtype=float)))
        return [term(gu) for term in self.terms]


def trajectory_loglik(model: FittedMbjm, query: RiskQuery, u, lts=False):
    """Sum over layers of the marginal log-likelihood of the history given ``T = u``.

    With ``lts`` the long-term-survivor layers are used and ``u`` is ignored.
    """
    out = TrajectoryLikelihood(model, query, lts)(u)
    return float(out[0]) if np.ndim(u) == 0 else out


# ---------------------------------------------------------------------------
# risk integral
# ---------------------------------------------------------------------------


_GL_CACHE: dict = {}


def _gl(order):
    if order not in _GL_CACHE:
        _GL_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GL_CACHE[order]


def _composite_log_integral(logf, a, b, panels, order):
    x, w = _gl(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    logw = (np.log(half)[:, None] + np.log(w)[None, :]).ravel()
    v = logf(nodes) + logw
    top = v.max()
    if not np.isfinite(top):
        return -math.inf
    return float(top + math.log(np.exp(v - top).sum()))


def log_integral(logf, a, b, settings: IntegrationSettings):
    """``log int_a^b exp(logf)`` by composite Gauss-Legendre with panel doubling.

    The interval is first split around the region where the integrand is
    within ``exp(-50)`` of its maximum on a coarse grid, so that a narrow peak
    gets its own panel.
    """
    if not b > a:
        return -math.inf
    grid = np.linspace(a, b, 65)
    lg = logf(grid)
    pieces = [(a, b)]
    if np.isfinite(lg).any():
        top = np.nanmax(lg)
        keep = np.flatnonzero(lg > top - 50)
        lo = grid[max(keep[0] - 1, 0)]
        hi = grid[min(keep[-1] + 1, len(grid) - 1)]
        # peak piece first so the flanks converge relative to the running total
        pieces = [(p, q) for p, q in ((lo, hi), (a, lo), (hi, b)) if q > p]
    total = -math.inf
    order = settings.gl_order
    for p, q in pieces:
        panels = settings.initial_panels
        prev = _composite_log_integral(logf, p, q, panels, order)
        while True:
            panels *= 2
            cur = _composite_log_integral(logf, p, q, panels, order)
            scale = max(cur, total)
            if cur == prev == -math.inf:
                break
            # the last doubling must move the estimate well inside rel_tol
            if np.isfinite(cur) and abs(math.exp(cur - scale) - math.exp(prev - scale)) < \
                    settings.rel_tol * 1e-2:
                break
            if panels * order * 2 > settings.max_nodes:
                break
            prev = cur
        total = float(np.logaddexp(total, cur))
    return total


@dataclass(frozen=True)
class RiskParts:
    risk: float
    log_numerator: float
    log_denominator: float


def _risk_parts(model: FittedMbjm, query: RiskQuery, settings=None, horizons=None):
    """Risk components for each horizon; the denominator is shared."""
    settings = settings or model.config.integration
    surv = model.survival
    V = query.V
    s = float(query.s)
    horizons = [float(query.horizon)] if horizons is None else [float(h) for h in horizons]
    if any(not h > 0 for h in horizons):
        raise PredictionError("horizon must be positive")
    if len(V) != len(model.covariate_names):
        raise PredictionError("covariate vector has the wrong length")
    S_s = float(surv.survival(s, V))
    if S_s <= 0:
        raise PredictionError("subject cannot be at risk at s under the survival model")
    order = np.argsort(horizons)
    tau = model.config.tau_max
    two_part = model.config.variant == "TP" and math.isfinite(tau)
    if two_part and s >= tau:
        out = []
        for h in horizons:
            S_e = float(surv.survival(s + h, V))
            out.append(RiskParts((S_s - S_e) / S_s, math.log(max(S_s - S_e, 1e-300)),
                                 math.log(S_s)))
        return out
    traj = TrajectoryLikelihood(model, query)

    def logf(u):
        return traj(u) + surv.log_density(u, V)

    if two_part:
        end_all = tau
    else:
        end_all = float(surv.survival_quantile(settings.tail_mass * S_s, V))
    # cumulative log integrals over [s, min(s + h, end_all)] in horizon order
    log_n = {}
    acc, prev = -math.inf, s
    for k in order:
        e = min(s + horizons[k], end_all)
        if e > prev:
            acc = float(np.logaddexp(acc, log_integral(logf, prev, e, settings)))
            prev = e
        log_n[k] = acc
    log_body = acc
    if end_all > prev:
        log_body = float(np.logaddexp(acc, log_integral(logf, prev, end_all, settings)))
    log_d = log_body
    if two_part:
        ll_lts = float(TrajectoryLikelihood(model, query, lts=True)(np.zeros(1))[0])
        S_tau = float(surv.survival(tau, V))
        log_lts = ll_lts + math.log(S_tau) if S_tau > 0 else -math.inf
        log_d = float(np.logaddexp(log_body, log_lts))
        for k, h in enumerate(horizons):
            if s + h > tau and S_tau > 0:
                S_e = float(surv.survival(s + h, V))
                log_n[k] = float(np.logaddexp(log_n[k],
                                              ll_lts + math.log(max(S_tau - S_e, 1e-300))))
    # log space: only a true underflow of the shifted integrand is fatal
    if not np.isfinite(log_d):
        raise PredictionError("history has vanishing likelihood under model")
    out = []
    for k in range(len(horizons)):
        risk = math.exp(min(log_n[k] - log_d, 0.0))
        out.append(RiskParts(min(max(risk, 0.0), 1.0), log_n[k], log_d))
    return out


def dynamic_risk(model: FittedMbjm, query: RiskQuery, settings: IntegrationSettings | None = None):
    """P(s < T <= s + horizon | history up to s, T > s, V)."""
    return _risk_parts(model, query, settings)[0].risk


def dynamic_risks(model: FittedMbjm, query: RiskQuery, horizons,
                  settings: IntegrationSettings | None = None):
    """``dynamic_risk`` for several horizons sharing one history (``query.horizon`` unused)."""
    return np.array([p.risk for p in _risk_parts(model, query, settings, horizons)])


def risk_trajectory(model: FittedMbjm, V, times, values, horizon):
    """Dynamic risk at every visit using the history up to and including it.

    Returns an array of shape ``(n_visits, 2)`` with columns ``(s, risk)``.
    """
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        raise PredictionError("subject has no visits")
    values = np.asarray(values, dtype=float).reshape(len(times), -1)
    out = np.empty((len(times), 2))
    for j, s in enumerate(times):
        q = RiskQuery(V, times[:j + 1], values[:j + 1], s, horizon)
        out[j] = (s, dynamic_risk(model, q))
    return out


def query_for_subject(ds: LongitudinalDataset, i: int, s: float, horizon: float,
                      complete_rows=True) -> RiskQuery:
    """History of subject ``i`` truncated at ``s``; incomplete rows dropped if asked."""
    t, y = ds.visits_of(i)
    keep = t <= s
    if complete_rows:
        keep &= np.all(np.isfinite(y), axis=1)
    return RiskQuery(ds.V[i], t[keep], y[keep], s, horizon)
