"""Synthetic data generators and Monte Carlo experiments.

Two generative families are provided:

* Sim-MBJM: data drawn from a known MBJM (``FittedMbjm`` used as the truth),
  EX or two-part.
* Sim-SJM: a shared random effects joint model where each biomarker has a
  random intercept and the hazard is multiplied by
  ``exp(sum_m alpha_m * b_m)``.

Default parameters are loosely modelled on a seven-biomarker liver-disease
cohort (two binary and five continuous markers, age and sex at baseline).
"""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import BiomarkerSpec, LongitudinalDataset, ModelConfig, G_TRANSFORMS
from .engine import FittedMbjm, RiskQuery, dynamic_risks, fit_mbjm, layer_designs
from .mixed import GlmmFit, LmmFit
from .survival import WeibullModel

COVARIATES = ("age", "female")
BIOMARKERS = (
    BiomarkerSpec("ascites", "categorical", layer_index=1),
    BiomarkerSpec("hepatomegaly", "categorical", layer_index=2),
    BiomarkerSpec("bilirubin", layer_index=3),
    BiomarkerSpec("prothrombin", layer_index=4),
    BiomarkerSpec("albumin", layer_index=5),
    BiomarkerSpec("alkaline", layer_index=6),
    BiomarkerSpec("sgot", layer_index=7),
)

# fixed effects per layer: [intercept, t, age, female, previous layers..., g(T)]
# Only bilirubin and prothrombin carry the event-time signal; residual noise
# dominates a single visit, so the history matters. Effects are either zero
# or large relative to their sampling error at n = 1500.
_EX_BETAS = [
    [-1.5, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 1.0, 0.0],
    [1.0, 0.3, 0.0, 0.0, 0.5, 0.0, -0.3],
    [1.0, 0.3, 0.5, 0.0, 0.0, 0.5, 0.1, -0.3],
    [3.0, 0.0, -0.5, 0.0, 0.0, 0.0, -0.1, 0.0, 0.0],
    [2.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0],
    [2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.1, 0.0, -0.1, 0.0, 0.0],
]
_EX_OMEGA = [1.0, 1.0, 0.3, 0.3, 0.3, 0.3, 0.3]
_EX_SIGMA2 = [None, None, 6.0, 6.0, 6.0, 6.0, 6.0]

# long-term survivors: no g(T) column, a quieter and more homogeneous group
_LTS_BETAS = [
    [-2.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 1.0],
    [-2.0, 0.1, 0.0, 0.0, 0.5, 0.0],
    [-2.0, 0.1, 0.5, 0.0, 0.0, 0.5, 0.1],
    [3.0, 0.0, -0.5, 0.0, 0.0, 0.0, -0.1, 0.0],
    [2.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.1, 0.0],
    [2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.1, 0.0, -0.1, 0.0],
]
_LTS_OMEGA = [1.0, 1.0, 0.25, 0.25, 0.25, 0.25, 0.25]
_LTS_SIGMA2 = [None, None, 1.0, 1.0, 1.0, 1.0, 1.0]

_SURVIVAL = WeibullModel(1.5, np.array([2.0, -0.2, 0.3]), COVARIATES)


def _layer_fits(designs, betas, omegas, sigmas):
    fits = []
    for d, b, w, s in zip(designs, betas, omegas, sigmas):
        if d.kind == "categorical":
            fits.append(GlmmFit(d, np.array(b, float), np.array([[w]])))
        else:
            fits.append(LmmFit(d, np.array(b, float), np.array([[w]]), float(s)))
    return fits


def default_truth(variant="EX", tau_max=None) -> FittedMbjm:
    """The shipped default Sim-MBJM parameterisation."""
    cfg = ModelConfig(variant, math.inf if variant == "EX" else tau_max)
    layers = _layer_fits(layer_designs(BIOMARKERS, COVARIATES, cfg, True), _EX_BETAS, _EX_OMEGA,
                         _EX_SIGMA2)
    lts = None
    if variant == "TP":
        lts = _layer_fits(layer_designs(BIOMARKERS, COVARIATES, cfg, False), _LTS_BETAS,
                          _LTS_OMEGA, _LTS_SIGMA2)
    return FittedMbjm(_SURVIVAL, layers, cfg, BIOMARKERS, COVARIATES, lts)


@dataclass
class SjmTruth:
    """Shared random-intercept joint model used for Sim-SJM."""

    survival: WeibullModel
    betas: list            # per biomarker: [intercept, t, age, female]
    omega2: list           # random intercept variances
    sigma2: list           # residual variances (None for binary markers)
    alpha: list            # association of each random intercept with the log hazard
    biomarkers: tuple = BIOMARKERS
    covariate_names: tuple = COVARIATES

    def to_json(self):
        return {"survival": self.survival.to_json(), "betas": self.betas, "omega2": self.omega2,
                "sigma2": self.sigma2, "alpha": self.alpha,
                "biomarkers": [b.to_json() for b in self.biomarkers],
                "covariate_names": list(self.covariate_names)}

    @classmethod
    def from_json(cls, d):
        return cls(WeibullModel.from_json(d["survival"]), d["betas"], d["omega2"], d["sigma2"],
                   d["alpha"], tuple(BiomarkerSpec.from_json(b) for b in d["biomarkers"]),
                   tuple(d["covariate_names"]))


def default_sjm_truth() -> SjmTruth:
    return SjmTruth(
        survival=WeibullModel(1.5, np.array([2.0, -0.3, 0.5]), COVARIATES),
        betas=[[-2.0, 0.2, 0.5, 0.0], [-0.5, 0.2, 0.0, -0.5], [0.5, 0.2, 0.0, 0.0],
               [0.0, 0.15, 0.3, 0.0], [3.5, -0.1, -0.3, 0.0], [1.0, 0.1, 0.0, 0.5],
               [0.0, 0.15, 0.0, 0.0]],
        omega2=[1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5],
        sigma2=[None, None, 0.5, 0.5, 0.5, 0.5, 0.5],
        alpha=[0.3, 0.3, 0.5, 0.4, -0.4, 0.3, 0.3],
    )


@dataclass
class SimScenario:
    kind: str = "MBJM-EX"             # MBJM-EX, MBJM-TP or SJM
    n: int = 1500
    seed: int = 0
    censoring_rate: float = 0.45
    tau_censoring_rate: float = 0.15    # TP: share censored alive at tau_max
    visit_interval: float = 0.5
    visit_jitter: float = 0.1
    female_prob: float = 0.5
    truth: object = None
    censoring_hazard: float | None = None
    tau_max: float | None = None

    def __post_init__(self):
        if self.kind not in ("MBJM-EX", "MBJM-TP", "SJM"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0 < self.censoring_rate < 1:
            raise ValueError("censoring_rate must lie in (0, 1)")
        if self.truth is None:
            if self.kind == "SJM":
                self.truth = default_sjm_truth()
            else:
                self.truth = default_truth("EX")
        if self.censoring_hazard is None:
            self.calibrate()

    @property
    def variant(self):
        return "TP" if self.kind == "MBJM-TP" else "EX"

    # censoring calibration ---------------------------------------------------
    def _reference_times(self, size=200_000):
        rng = np.random.default_rng(20240101)
        V = self._covariates(rng, size)
        if self.kind == "SJM":
            T, _ = _sjm_event_times(self.truth, V, rng)
        else:
            T = _weibull_draw(self.truth.survival, V, rng)
        return T, V

    def calibrate(self):
        """Solve the censoring hazard (and tau_max for TP) for the target rates."""
        T, V = self._reference_times()
        if self.kind != "MBJM-TP":
            def rate(lam):
                return float(np.mean(-np.expm1(-lam * T)))
            self.censoring_hazard = _bisect(rate, self.censoring_rate, 1e-8, 50.0)
            return self
        target_tau = self.tau_censoring_rate
        if not (0 < target_tau < self.censoring_rate):
            raise ValueError(f"censoring target unattainable: total rate must exceed the tau_max "
                             f"share; achievable range ({target_tau}, 1)")
        Ts = np.sort(T)

        def tau_for(lam):
            def alive(tau):
                surv = 1.0 - np.searchsorted(Ts, tau, side="right") / len(Ts)
                return -(surv * math.exp(-lam * tau))
            hi = Ts[-1]
            return _bisect(alive, -target_tau, 0.0, hi)

        def total(lam):
            tau = tau_for(lam)
            m = np.minimum(T, tau)
            return float(np.mean(-np.expm1(-lam * m)) + np.mean((T > tau) * math.exp(-lam * tau)))

        lo_rate = total(1e-8)
        if self.censoring_rate <= lo_rate:
            raise ValueError(f"censoring target unattainable; achievable range ({lo_rate:.3f}, 1)")
        lam = _bisect(total, self.censoring_rate, 1e-8, 50.0)
        self.censoring_hazard = lam
        self.tau_max = float(tau_for(lam))
        self.truth = default_truth("TP", self.tau_max) if self.truth.config.variant != "TP" else \
            replace_tau(self.truth, self.tau_max)
        return self

    def _covariates(self, rng, n):
        return np.column_stack([rng.standard_normal(n),
                                (rng.random(n) < self.female_prob).astype(float)])

    def to_json(self):
        d = {k: getattr(self, k) for k in ("kind", "n", "seed", "censoring_rate",
                                           "tau_censoring_rate", "visit_interval",
                                           "visit_jitter", "female_prob", "censoring_hazard",
                                           "tau_max")}
        d["truth"] = self.truth.to_json()
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        truth = d.pop("truth", None)
        if truth is not None:
            truth = SjmTruth.from_json(truth) if d.get("kind") == "SJM" else \
                FittedMbjm.from_json(truth)
        return cls(truth=truth, **d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def replace_tau(model: FittedMbjm, tau):
    cfg = replace(model.config, tau_max=tau)
    return FittedMbjm(model.survival, model.layers, cfg, model.biomarkers,
                      model.covariate_names, model.lts_layers)


def _bisect(f, target, lo, hi, iters=100):
    """Root of increasing ``f(x) = target`` on [lo, hi]."""
    flo, fhi = f(lo), f(hi)
    if not (flo <= target <= fhi):
        raise ValueError(f"target {target} outside achievable range [{flo:.4g}, {fhi:.4g}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _weibull_draw(m: WeibullModel, V, rng):
    lam = np.exp(m.coefficients[0] + V @ m.coefficients[1:])
    return lam * (-np.log(rng.random(len(lam)))) ** (1.0 / m.shape)


def sample_inverse_hazard(cumhaz, n, rng, t_max=1e4, tol=1e-10):
    """Event times from a cumulative hazard by inversion.

    ``cumhaz(t)`` must accept an (n,) array of times (one per subject) and be
    non-decreasing. Solves ``H_i(T_i) = E_i`` with ``E_i ~ Exp(1)`` by
    vectorised bisection; subjects whose hazard never reaches ``E_i`` before
    ``t_max`` get ``inf``.
    """
    E = rng.exponential(size=n)
    lo = np.zeros(n)
    hi = np.full(n, float(t_max))
    never = cumhaz(hi) < E
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = cumhaz(mid) < E
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < tol:
            break
    out = 0.5 * (lo + hi)
    out[never] = np.inf
    return out


def _sjm_event_times(truth: SjmTruth, V, rng):
    n = len(V)
    b = np.column_stack([rng.normal(0, math.sqrt(w), n) for w in truth.omega2])
    eta = b @ np.asarray(truth.alpha, float)
    sv = truth.survival
    scale = np.exp(sv.coefficients[0] + V @ sv.coefficients[1:])
    k = sv.shape

    def H(t):
        return (t / scale) ** k * np.exp(eta)

    T = sample_inverse_hazard(H, n, rng, t_max=1e4 * scale.max())
    return T, b


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _visit_grid(T, interval, jitter, rng):
    n = len(T)
    J = int(np.ceil(np.max(T) / interval)) + 2
    grid = interval * np.arange(J)[None, :] + rng.uniform(-jitter, jitter, (n, J))
    grid[:, 0] = 0.0
    keep = grid < T[:, None]
    subj = np.repeat(np.arange(n), keep.sum(1))
    times = grid[keep]
    return subj, times


def _draw_layers(fits, t, Vr, gT, subj, n_subj, rng, Y, rows):
    """Fill ``Y[rows]`` layer by layer from ``fits``."""
    for m, f in enumerate(fits):
        d = f.design
        X, Z = d.build(t, Vr, Y[rows, :m], gT if d.include_g else None)
        L = np.linalg.cholesky(f.omega) if np.any(f.omega) else np.zeros_like(f.omega)
        b = rng.standard_normal((n_subj, L.shape[0])) @ L.T
        eta = X @ f.beta + np.einsum("nq,nq->n", Z, b[subj])
        if f.kind == "categorical":
            Y[rows, m] = (rng.random(len(eta)) < expit(eta)).astype(float)
        else:
            Y[rows, m] = eta + rng.normal(0.0, math.sqrt(f.sigma2), len(eta))


def _mbjm_dataset(sc: SimScenario, rng, n, censored: bool):
    truth: FittedMbjm = sc.truth
    V = sc._covariates(rng, n)
    Tt = _weibull_draw(truth.survival, V, rng)
    if censored:
        C = rng.exponential(1.0 / sc.censoring_hazard, n)
        T = np.minimum(Tt, C)
        delta = (Tt <= C).astype(int)
        if sc.kind == "MBJM-TP":
            T = np.minimum(T, sc.tau_max)
            delta = delta * (Tt <= sc.tau_max)
    else:
        T, delta = Tt.copy(), np.ones(n, int)
    subj, times = _visit_grid(T, sc.visit_interval, sc.visit_jitter, rng)
    M = truth.n_layers
    Y = np.empty((len(times), M))
    g = G_TRANSFORMS[truth.config.g_transform]
    lts = np.zeros(n, bool)
    if sc.kind == "MBJM-TP":
        lts = Tt > sc.tau_max
    for is_lts, fits in ((False, truth.layers), (True, truth.lts_layers)):
        if fits is None:
            continue
        sel = lts[subj] == is_lts
        rows = np.flatnonzero(sel)
        if len(rows) == 0:
            continue
        sub = subj[rows]
        _draw_layers(fits, times[rows], V[sub], g(Tt[sub]), sub, n, rng, Y, rows)
    ids = [f"S{i + 1:05d}" for i in range(n)]
    ds = LongitudinalDataset(ids, T, delta, V, subj, times, Y, truth.biomarkers,
                             truth.covariate_names)
    return ds, Tt


def _rng_pair(seed):
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def generate_mbjm_data(sc: SimScenario):
    """``(training, validation)`` datasets; validation is uncensored."""
    if sc.kind not in ("MBJM-EX", "MBJM-TP"):
        raise ValueError("generate_mbjm_data needs a Sim-MBJM scenario")
    r_train, r_val = _rng_pair(sc.seed)
    train, _ = _mbjm_dataset(sc, r_train, sc.n, True)
    val, _ = _mbjm_dataset(sc, r_val, sc.n, False)
    return train, val


def _sjm_dataset(sc: SimScenario, rng, n, censored):
    tr: SjmTruth = sc.truth
    V = sc._covariates(rng, n)
    Tt, b = _sjm_event_times(tr, V, rng)
    if censored:
        C = rng.exponential(1.0 / sc.censoring_hazard, n)
        T = np.minimum(Tt, C)
        delta = (Tt <= C).astype(int)
    else:
        T, delta = Tt.copy(), np.ones(n, int)
    subj, times = _visit_grid(T, sc.visit_interval, sc.visit_jitter, rng)
    Vr = V[subj]
    Y = np.empty((len(times), len(tr.biomarkers)))
    for m, spec in enumerate(tr.biomarkers):
        beta = np.asarray(tr.betas[m], float)
        eta = beta[0] + beta[1] * times + Vr @ beta[2:] + b[subj, m]
        if spec.categorical:
            Y[:, m] = (rng.random(len(eta)) < expit(eta)).astype(float)
        else:
            Y[:, m] = eta + rng.normal(0, math.sqrt(tr.sigma2[m]), len(eta))
    ids = [f"S{i + 1:05d}" for i in range(n)]
    return LongitudinalDataset(ids, T, delta, V, subj, times, Y, tr.biomarkers,
                               tr.covariate_names)


def generate_sjm_data(sc: SimScenario):
    """``(training, validation)`` datasets from the shared random effects model."""
    if sc.kind != "SJM":
        raise ValueError("generate_sjm_data needs a Sim-SJM scenario")
    r_train, r_val = _rng_pair(sc.seed)
    return _sjm_dataset(sc, r_train, sc.n, True), _sjm_dataset(sc, r_val, sc.n, False)


def generate(sc: SimScenario):
    return generate_sjm_data(sc) if sc.kind == "SJM" else generate_mbjm_data(sc)


# ---------------------------------------------------------------------------
# oracle risk under the shared random effects model
# ---------------------------------------------------------------------------


def sjm_oracle_risk(truth: SjmTruth, query: RiskQuery, n_gh=40, n_grid=81, horizons=None):
    """Risk from the true SJM parameters.

    Returns a float for ``query.horizon``, or an array when ``horizons`` is given.

    Continuous markers give a Gaussian posterior for their random intercept,
    so their contribution to the log hazard is one Gaussian variable;
    binary markers' posteriors are tabulated on a grid. The at-risk
    condition enters as the weight ``S(s | b)``.
    """
    s, dlt = query.s, query.horizon
    V = query.V
    t, Y = query.times, query.values
    alpha = np.asarray(truth.alpha, float)
    mu_c, var_c = 0.0, 0.0
    cat_grids = []
    for m, spec in enumerate(truth.biomarkers):
        beta = np.asarray(truth.betas[m], float)
        w2 = truth.omega2[m]
        fixed = beta[0] + beta[1] * t + V @ beta[2:] if len(t) else np.zeros(0)
        if not spec.categorical:
            prec = 1.0 / w2 + len(t) / truth.sigma2[m]
            mean = (np.sum(Y[:, m] - fixed) / truth.sigma2[m]) / prec if len(t) else 0.0
            mu_c += alpha[m] * mean
            var_c += alpha[m] ** 2 / prec
        else:
            sd = math.sqrt(w2)
            grid = np.linspace(-8 * sd, 8 * sd, n_grid)
            logp = -0.5 * grid ** 2 / w2
            if len(t):
                eta = fixed[None, :] + grid[:, None]
                logp = logp + np.sum(Y[:, m][None, :] * eta - np.logaddexp(0, eta), axis=1)
            cat_grids.append((alpha[m] * grid, logp))
    x, w = np.polynomial.hermite.hermgauss(n_gh)
    eta = mu_c + math.sqrt(2 * var_c) * x
    logw = np.log(w)
    for vals, logp in cat_grids:
        eta = (eta[:, None] + vals[None, :]).ravel()
        logw = (logw[:, None] + logp[None, :]).ravel()
    sv = truth.survival
    lam = math.exp(sv.coefficients[0] + V @ sv.coefficients[1:])
    e_eta = np.exp(eta)
    wt = np.exp(logw - logw.max())
    S_s = np.exp(-(s / lam) ** sv.shape * e_eta)
    den = np.sum(wt * S_s)
    hs = [dlt] if horizons is None else list(horizons)
    out = np.array([np.sum(wt * (S_s - np.exp(-((s + h) / lam) ** sv.shape * e_eta))) / den
                    for h in hs])
    return float(out[0]) if horizons is None else out


# ---------------------------------------------------------------------------
# Monte Carlo experiments
# ---------------------------------------------------------------------------


def _fit_config(sc: SimScenario):
    if sc.kind == "MBJM-TP":
        return ModelConfig("TP", sc.tau_max)
    return ModelConfig("EX")


def _bias_rep(args):
    sc, n, seed = args
    sc_rep = replace(sc, n=n, seed=seed)
    train, _ = generate_mbjm_data(sc_rep)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_mbjm(train, _fit_config(sc))
        return fit.param_vector(), None
    except Exception as e:  # noqa: BLE001 - failures are counted, not fatal
        return None, repr(e)


@dataclass
class BiasTable:
    names: list
    truth: np.ndarray
    n_grid: list
    mean: dict = field(default_factory=dict)
    percent_bias: dict = field(default_factory=dict)
    abs_bias: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    reps: dict = field(default_factory=dict)

    def relative_mask(self, threshold=0.1):
        return np.abs(self.truth) >= threshold

    def rows(self):
        for j, nm in enumerate(self.names):
            row = {"parameter": nm, "truth": float(self.truth[j])}
            for n in self.n_grid:
                row[f"mean_n{n}"] = float(self.mean[n][j])
                row[f"pct_bias_n{n}"] = float(self.percent_bias[n][j])
                row[f"abs_bias_n{n}"] = float(self.abs_bias[n][j])
            yield row

    def to_csv(self, path):
        import csv
        rows = list(self.rows())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def bias_experiment(sc: SimScenario, n_grid=(300, 1500), reps=300, workers=1) -> BiasTable:
    """Monte Carlo mean, percent bias and absolute bias of every parameter.

    Percent bias is ``100 (mean - truth) / |truth|``; it is reported as NaN
    for parameters with ``|truth| < 0.1``, whose absolute bias is used instead.
    """
    if sc.kind not in ("MBJM-EX", "MBJM-TP"):
        raise ValueError("bias experiment needs a Sim-MBJM scenario")
    names, truth = sc.truth.param_table()
    table = BiasTable(list(names), truth, list(n_grid))
    root = np.random.SeedSequence(sc.seed)
    for n, child in zip(n_grid, root.spawn(len(n_grid))):
        seeds = [int(s.generate_state(1)[0]) for s in child.spawn(reps)]
        jobs = [(sc, n, s) for s in seeds]
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_bias_rep, jobs, chunksize=4))
        else:
            results = [_bias_rep(j) for j in jobs]
        est = np.array([r[0] for r in results if r[0] is not None])
        table.failures[n] = [r[1] for r in results if r[0] is None]
        table.reps[n] = len(est)
        mean = est.mean(0) if len(est) else np.full(len(truth), np.nan)
        table.mean[n] = mean
        table.abs_bias[n] = mean - truth
        with np.errstate(divide="ignore", invalid="ignore"):
            pct = 100.0 * (mean - truth) / np.abs(truth)
        pct[np.abs(truth) < 0.1] = np.nan
        table.percent_bias[n] = pct
    return table


@dataclass
class TimingResult:
    n_grid: list
    mean_seconds: list
    convergence_rate: list
    times: list

    def loglog_slope(self):
        x = np.log(np.asarray(self.n_grid, float))
        y = np.log(np.asarray(self.mean_seconds, float))
        return float(np.polyfit(x, y, 1)[0])


def timing_benchmark(n_grid=(200, 500, 1000, 1500, 2000, 3000), reps=5, seed=0,
                     kind="MBJM-EX") -> TimingResult:
    """Wall-clock time of ``fit_mbjm`` per sample size (data generation excluded)."""
    sc = SimScenario(kind, seed=seed)
    means, conv, all_t = [], [], []
    ss = np.random.SeedSequence(seed)
    for n, child in zip(n_grid, ss.spawn(len(n_grid))):
        ts, ok = [], 0
        for s in child.spawn(reps):
            sc_rep = replace(sc, n=n, seed=int(s.generate_state(1)[0]))
            train, _ = generate(sc_rep)
            t0 = time.perf_counter()
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    fit_mbjm(train, _fit_config(sc))
                ok += 1
            except Exception:  # noqa: BLE001 - counted as non-convergence
                pass
            ts.append(time.perf_counter() - t0)
        means.append(float(np.mean(ts)))
        conv.append(ok / reps)
        all_t.append(ts)
    return TimingResult(list(n_grid), means, conv, all_t)


# ---------------------------------------------------------------------------
# prediction accuracy on uncensored validation data
# ---------------------------------------------------------------------------


def _oracle_predict(sc: SimScenario, ds, subjects, s, horizons):
    out = np.full((len(subjects), len(horizons)), np.nan)
    for k, i in enumerate(subjects):
        t, y = ds.visits_of(int(i))
        keep = t <= s
        q = RiskQuery(ds.V[i], t[keep], y[keep], s, max(horizons))
        if sc.kind == "SJM":
            out[k] = sjm_oracle_risk(sc.truth, q, horizons=horizons)
        else:
            out[k] = dynamic_risks(sc.truth, q, horizons)
    return out


def _accuracy_rep(args):
    sc, seed, landmarks, horizons, models = args
    from .evaluation import accuracy_rows, predict_mbjm, predict_spm
    from .spm import fit_spm
    train, valid = generate(replace(sc, seed=seed))
    rows = []
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fitted = {m: fit_spm(train) if m == "SPM" else
                      fit_mbjm(train, ModelConfig("EX")) if m == "MBJM-EX" else None
                      for m in models}
            for m in models:
                preds = {}
                for s in landmarks:
                    subj = np.flatnonzero(valid.T > s)
                    if m == "ORACLE":
                        P = _oracle_predict(sc, valid, subj, s, horizons)
                    elif m == "SPM":
                        P = predict_spm(fitted[m], valid, subj, s, horizons)
                    else:
                        P = predict_mbjm(fitted[m], valid, subj, s, horizons)
                    for j, h in enumerate(horizons):
                        ok = np.isfinite(P[:, j])
                        preds[(s, h)] = (subj[ok], P[ok, j])
                rows.extend(accuracy_rows(m, preds, valid.T, valid.delta, landmarks, horizons))
    except Exception as e:  # noqa: BLE001 - a failed replicate is counted
        return None, repr(e)
    return rows, None


@dataclass
class AccuracyExperiment:
    rows: list                      # one list of AccuracyRow per successful replicate
    failures: list
    landmarks: tuple
    horizons: tuple

    def values(self, model, metric):
        """Array ``(reps, landmarks, horizons)`` of ``metric`` for ``model``."""
        out = np.full((len(self.rows), len(self.landmarks), len(self.horizons)), np.nan)
        for r, rows in enumerate(self.rows):
            for row in rows:
                if row.model == model:
                    out[r, self.landmarks.index(row.s), self.horizons.index(row.horizon)] = \
                        getattr(row, metric)
        return out

    def mean(self, model, metric):
        return np.nanmean(self.values(model, metric), axis=0)

    def table(self):
        models = sorted({row.model for rows in self.rows for row in rows})
        out = []
        for m in models:
            auc, bs = self.mean(m, "auc"), self.mean(m, "brier")
            for a, s in enumerate(self.landmarks):
                for b, h in enumerate(self.horizons):
                    out.append({"model": m, "s": s, "horizon": h, "auc": float(auc[a, b]),
                                "brier": float(bs[a, b])})
        return out


def accuracy_experiment(sc: SimScenario, reps=100, landmarks=(1, 3, 5), horizons=(1, 3),
                        models=("MBJM-EX", "SPM"), workers=1) -> AccuracyExperiment:
    """Monte Carlo AUC and Brier score on uncensored validation sets.

    ``models`` may include ``MBJM-EX``, ``SPM`` and ``ORACLE`` (the risk
    computed from the true generative parameters).
    """
    landmarks = tuple(float(s) for s in landmarks)
    horizons = tuple(float(h) for h in horizons)
    seeds = [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(sc.seed).spawn(reps)]
    jobs = [(sc, s, landmarks, horizons, tuple(models)) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_accuracy_rep, jobs))
    else:
        results = [_accuracy_rep(j) for j in jobs]
    return AccuracyExperiment([r for r, _ in results if r is not None],
                              [e for r, e in results if r is None], landmarks, horizons)
