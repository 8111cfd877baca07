"""Prediction accuracy: time-dependent AUC, Brier score, cross-validation,
bootstrap variance and logit-scale confidence intervals.

Real data are right-censored, so window outcomes are weighted by inverse
probability of censoring (IPCW) with a Kaplan-Meier estimate of the
censoring distribution. For uncensored validation sets all weights are 1.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .data import LongitudinalDataset, ModelConfig, split_folds
from .engine import PredictionError, RiskQuery, dynamic_risks, fit_mbjm
from .spm import current_values, fit_spm, spm_predict


class UndefinedMetricWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def td_auc(p, cases, weights=None):
    """Weighted concordance between cases and controls; ties count one half.

    ``cases`` is the event-in-window indicator of subjects at risk at ``s``.
    Returns NaN (with an ``UndefinedMetricWarning`` naming the reason) when
    there are no cases or no controls with positive weight.
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(cases, dtype=bool)
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    p, y, w = p[keep], y[keep], w[keep]
    if not y.any():
        warnings.warn("AUC undefined: no cases in the window", UndefinedMetricWarning,
                      stacklevel=2)
        return math.nan
    if y.all():
        warnings.warn("AUC undefined: no controls in the window", UndefinedMetricWarning,
                      stacklevel=2)
        return math.nan
    levels, inv = np.unique(p, return_inverse=True)
    wc = np.bincount(inv[~y], weights=w[~y], minlength=len(levels))
    below = np.concatenate([[0.0], np.cumsum(wc)[:-1]])
    conc = below[inv[y]] + 0.5 * wc[inv[y]]
    return float(np.sum(w[y] * conc) / (w[y].sum() * w[~y].sum()))


def brier(p, cases, weights=None):
    """Weighted mean of ``(1{event in window} - p)^2``."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(cases, dtype=float)
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float)
    if len(p) == 0 or w.sum() <= 0:
        raise ValueError("Brier score of an empty at-risk set")
    return float(np.sum(w * (y - p) ** 2) / w.sum())


# ---------------------------------------------------------------------------
# censoring weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CensoringKM:
    """Kaplan-Meier estimate of ``G(t) = P(C > t)``."""

    times: np.ndarray
    surv: np.ndarray

    def __call__(self, t, left=False):
        """``G(t)``, or ``G(t-)`` with ``left``."""
        t = np.asarray(t, dtype=float)
        side = "left" if left else "right"
        k = np.searchsorted(self.times, t, side=side)
        return np.concatenate([[1.0], self.surv])[k]


def censoring_km(T, delta) -> CensoringKM:
    """Censoring survivor function; at tied times events are taken to come first."""
    T = np.asarray(T, dtype=float)
    cens = 1 - np.asarray(delta, dtype=int)
    times = np.unique(T[cens == 1])
    if len(times) == 0:
        return CensoringKM(np.zeros(0), np.zeros(0))
    n_risk = len(T) - np.searchsorted(np.sort(T), times, side="left")
    # events at a tied time leave the risk set before the censorings
    ev_tied = np.array([np.sum((T == t) & (cens == 0)) for t in times])
    d = np.array([np.sum((T == t) & (cens == 1)) for t in times])
    surv = np.cumprod(1.0 - d / (n_risk - ev_tied))
    return CensoringKM(times, surv)


def window_outcomes(T, delta, s, horizon, G: CensoringKM | None = None):
    """At-risk index, case indicator and IPCW weight for the window ``(s, s+h]``.

    Cases get weight ``G(s) / G(T-)``, controls ``G(s) / G(s+h)`` and subjects
    censored inside the window weight 0. Without ``G`` every weight is 1 and
    censored-in-window subjects are dropped.
    """
    T = np.asarray(T, dtype=float)
    delta = np.asarray(delta, dtype=int)
    at_risk = np.flatnonzero(T > s)
    Ta, da = T[at_risk], delta[at_risk]
    case = (Ta <= s + horizon) & (da == 1)
    control = Ta > s + horizon
    if G is None:
        w = (case | control).astype(float)
    else:
        Gs = G(s)
        w = np.zeros(len(Ta))
        w[case] = Gs / np.maximum(G(Ta[case], left=True), 1e-12)
        w[control] = Gs / max(float(G(s + horizon)), 1e-12)
    return at_risk, case, w


# ---------------------------------------------------------------------------
# accuracy report
# ---------------------------------------------------------------------------


@dataclass
class AccuracyRow:
    model: str
    s: float
    horizon: float
    auc: float
    brier: float
    n_at_risk: int
    n_cases: int


@dataclass
class AccuracyReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    folds: list = field(default_factory=list)

    def cell(self, model, s, horizon) -> AccuracyRow:
        for r in self.rows:
            if r.model == model and r.s == s and r.horizon == horizon:
                return r
        raise KeyError((model, s, horizon))

    @property
    def models(self):
        return sorted({r.model for r in self.rows})

    def at_risk_counts(self, model=None):
        model = model or self.models[0]
        return {r.s: r.n_at_risk for r in self.rows if r.model == model}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["accuracy", "horizon", "model", "s", "value", "n_at_risk"])
            for metric in ("auc", "brier"):
                for r in sorted(self.rows, key=lambda r: (r.horizon, r.model, r.s)):
                    w.writerow([metric.upper() if metric == "auc" else "BS", r.horizon,
                                r.model, r.s, getattr(r, metric), r.n_at_risk])


def accuracy_rows(model, preds, T, delta, landmarks, horizons, G=None):
    """Rows for one model from pooled predictions ``preds[(s, h)] -> (index, p)``."""
    rows = []
    for s in landmarks:
        for h in horizons:
            idx, p = preds[(s, h)]
            at_risk, case, w = window_outcomes(T, delta, s, h, G)
            pos = {int(i): k for k, i in enumerate(at_risk)}
            sel = np.array([pos[int(i)] for i in idx], dtype=int)
            c, ww = case[sel], w[sel]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UndefinedMetricWarning)
                auc = td_auc(p, c, ww)
            bs = brier(p, c, ww) if ww.sum() > 0 else math.nan
            rows.append(AccuracyRow(model, s, h, auc, bs, len(at_risk), int(c.sum())))
    return rows


# ---------------------------------------------------------------------------
# prediction helpers
# ---------------------------------------------------------------------------


def predict_mbjm(model, ds: LongitudinalDataset, subjects, s, horizons):
    """Dynamic risks for ``subjects`` at landmark ``s``; failures give NaN."""
    out = np.full((len(subjects), len(horizons)), np.nan)
    for k, i in enumerate(subjects):
        t, y = ds.visits_of(int(i))
        keep = (t <= s) & np.all(np.isfinite(y), axis=1)
        try:
            q = RiskQuery(ds.V[i], t[keep], y[keep], s, max(horizons))
            out[k] = dynamic_risks(model, q, horizons)
        except PredictionError as e:
            warnings.warn(f"subject {ds.subject_ids[i]} at s={s}: {e}", stacklevel=2)
    return out


def predict_spm(model, ds: LongitudinalDataset, subjects, s, horizons):
    out = np.full((len(subjects), len(horizons)), np.nan)
    for k, i in enumerate(subjects):
        t, y = ds.visits_of(int(i))
        cur = current_values(t, y, s)
        if not np.all(np.isfinite(cur)):
            continue
        out[k] = [spm_predict(model, ds.V[i], cur, h) for h in horizons]
    return out


def _config_for(name, config: ModelConfig):
    if name == "MBJM-EX" and config.variant != "EX":
        return ModelConfig("EX", math.inf, config.g_transform, config.random_effects,
                           config.quadrature_nodes, config.integration)
    return config


def cross_validate(ds: LongitudinalDataset, config: ModelConfig, k=5, landmarks=(1, 3, 5),
                   horizons=(1, 3), models=("MBJM",), seed=0, ipcw=True) -> AccuracyReport:
    """K-fold cross-validated AUC and Brier score.

    Each fold's models are fitted on the other folds only; predictions for
    held-out subjects at risk at every landmark are pooled across folds
    before the metrics are computed. ``models`` may contain ``"MBJM"`` (the
    given config), ``"MBJM-EX"`` and ``"SPM"``. A fold whose fit fails is
    skipped with a warning and recorded in ``report.failures``.
    """
    landmarks = [float(s) for s in landmarks]
    horizons = [float(h) for h in horizons]
    folds = split_folds(ds, k, seed)
    report = AccuracyReport()
    pooled = {m: {(s, h): ([], []) for s in landmarks for h in horizons} for m in models}
    for f, (train_idx, test_idx) in enumerate(folds):
        assert not np.intersect1d(train_idx, test_idx).size
        report.folds.append((train_idx, test_idx))
        train = ds.subset(train_idx)
        fitted = {}
        try:
            for m in models:
                if m == "SPM":
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        fitted[m] = fit_spm(train)
                else:
                    fitted[m] = fit_mbjm(train, _config_for(m, config))
        except Exception as e:  # noqa: BLE001 - a failed fold is skipped, not fatal
            warnings.warn(f"fold {f + 1}: fit failed ({e}); fold skipped", stacklevel=2)
            report.failures.append((f, repr(e)))
            continue
        for s in landmarks:
            subj = test_idx[ds.T[test_idx] > s]
            for m, model in fitted.items():
                fn = predict_spm if m == "SPM" else predict_mbjm
                P = fn(model, ds, subj, s, horizons)
                for j, h in enumerate(horizons):
                    ok = np.isfinite(P[:, j])
                    pooled[m][(s, h)][0].append(subj[ok])
                    pooled[m][(s, h)][1].append(P[ok, j])
    G = censoring_km(ds.T, ds.delta) if ipcw else None
    for m in models:
        preds = {key: (np.concatenate(v[0]) if v[0] else np.zeros(0, int),
                       np.concatenate(v[1]) if v[1] else np.zeros(0))
                 for key, v in pooled[m].items()}
        report.rows.extend(accuracy_rows(m, preds, ds.T, ds.delta, landmarks, horizons, G))
    return report


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    names: list
    estimate: np.ndarray
    replicates: np.ndarray
    n_requested: int
    n_failed: int = 0
    failures: list = field(default_factory=list)
    models: list = field(default_factory=list)

    @property
    def B(self):
        return len(self.replicates)

    @property
    def se_defined(self):
        return self.B >= 2

    @property
    def se(self):
        if not self.se_defined:
            return np.full(len(self.estimate), np.nan)
        return self.replicates.std(axis=0, ddof=1)

    def ci(self, level=0.95):
        z = norm.ppf(0.5 + level / 2)
        se = self.se
        return self.estimate - z * se, self.estimate + z * se

    def table(self, level=0.95):
        lo, hi = self.ci(level)
        return [{"parameter": n, "estimate": float(e), "se": float(s), "lo": float(a),
                 "hi": float(b)} for n, e, s, a, b in zip(self.names, self.estimate, self.se,
                                                          lo, hi)]


def bootstrap_fit(ds: LongitudinalDataset, config: ModelConfig, B=None, seed=None,
                  keep_models=False, estimate=None) -> BootstrapResult:
    """Subject-level nonparametric bootstrap of the full MBJM fit."""
    B = config.bootstrap_reps if B is None else int(B)
    if B < 1:
        raise ValueError("bootstrap needs B >= 1")
    seed = config.rng_seed if seed is None else seed
    est = estimate or fit_mbjm(ds, config)
    names, theta = est.param_table()
    reps, models, failures = [], [], []
    for child in np.random.SeedSequence(seed).spawn(B):
        idx = np.random.default_rng(child).integers(0, ds.n_subjects, ds.n_subjects)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                m = fit_mbjm(ds.subset(idx), config)
        except Exception as e:  # noqa: BLE001 - failed replicates are counted
            failures.append(repr(e))
            continue
        reps.append(m.param_vector())
        if keep_models:
            models.append(m)
    if failures:
        warnings.warn(f"{len(failures)} of {B} bootstrap replicates failed and were dropped",
                      stacklevel=2)
    res = BootstrapResult(list(names), theta, np.array(reps).reshape(len(reps), len(theta)), B,
                          len(failures), failures, models)
    if not res.se_defined:
        warnings.warn("bootstrap standard errors are undefined with fewer than 2 replicates",
                      stacklevel=2)
    return res


# ---------------------------------------------------------------------------
# confidence intervals
# ---------------------------------------------------------------------------


def ci_logit(p, se, level=0.95):
    """Wald interval on the logit scale, mapped back to probabilities."""
    p = float(p)
    if not 0 < p < 1:
        warnings.warn(f"probability {p} clamped into [1e-6, 1 - 1e-6] for the logit CI",
                      stacklevel=2)
        p = min(max(p, 1e-6), 1 - 1e-6)
    if se < 0:
        raise ValueError("standard error must be non-negative")
    z = norm.ppf(0.5 + level / 2)
    eta = logit(p)
    return float(expit(eta - z * se)), float(expit(eta + z * se))


def prediction_ci(point, replicate_risks, level=0.95):
    """CI for a predicted risk from bootstrap replicate predictions.

    The standard error is the spread of the replicates on the logit scale.
    """
    r = np.clip(np.asarray(replicate_risks, dtype=float), 1e-15, 1 - 1e-15)
    r = r[np.isfinite(r)]
    if len(r) < 2:
        return math.nan, math.nan
    se = float(np.std(logit(r), ddof=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ci_logit(point, se, level)
