"""Static prediction model: baseline Weibull regression applied at time s.

The model is trained on baseline covariates plus each subject's first
visit values. At prediction time the current (last observed) values are
plugged in and the risk is ``1 - S(horizon | V, Y(s))``; neither the
history nor the fact that the subject survived to ``s`` is used.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset
from .engine import PredictionError
from .survival import WeibullModel, fit_weibull


@dataclass(frozen=True)
class SpmModel:
    survival: WeibullModel
    covariate_names: tuple
    biomarker_names: tuple
    n_excluded: int = 0

    def predict(self, V, current, horizon):
        return spm_predict(self, V, current, horizon)

    def to_json(self):
        return {"model": "SPM", "survival": self.survival.to_json(),
                "covariate_names": list(self.covariate_names),
                "biomarker_names": list(self.biomarker_names), "n_excluded": self.n_excluded}

    @classmethod
    def from_json(cls, d):
        return cls(WeibullModel.from_json(d["survival"]), tuple(d["covariate_names"]),
                   tuple(d["biomarker_names"]), int(d.get("n_excluded", 0)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def baseline_values(ds: LongitudinalDataset):
    """First observed value of each biomarker per subject (NaN if never observed)."""
    out = np.full((ds.n_subjects, ds.n_biomarkers), np.nan)
    for i in range(ds.n_subjects):
        _, y = ds.visits_of(i)
        for m in range(ds.n_biomarkers):
            obs = np.flatnonzero(np.isfinite(y[:, m]))
            if len(obs):
                out[i, m] = y[obs[0], m]
    return out


def current_values(times, values, s):
    """Last observation carried forward to ``s``, per biomarker."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float).reshape(len(times), -1)
    out = np.full(values.shape[1], np.nan)
    keep = times <= s
    for m in range(values.shape[1]):
        obs = np.flatnonzero(keep & np.isfinite(values[:, m]))
        if len(obs):
            out[m] = values[obs[-1], m]
    return out


def fit_spm(ds: LongitudinalDataset) -> SpmModel:
    """Weibull regression of T on ``[V, Y(0)]``; subjects without a baseline are dropped."""
    Y0 = baseline_values(ds)
    ok = np.all(np.isfinite(Y0), axis=1)
    n_bad = int((~ok).sum())
    if n_bad:
        warnings.warn(f"SPM: {n_bad} subject(s) without complete baseline values excluded",
                      stacklevel=2)
    X = np.column_stack([ds.V, Y0])[ok]
    names = (*ds.covariate_names, *ds.biomarker_names)
    wm = fit_weibull(ds.T[ok], ds.delta[ok], X, names)
    return SpmModel(wm, tuple(ds.covariate_names), tuple(ds.biomarker_names), n_bad)


def spm_predict(model: SpmModel, V, current, horizon):
    """``1 - S(horizon | V, Y(s))``."""
    x = np.concatenate([np.atleast_1d(np.asarray(V, dtype=float)),
                        np.atleast_1d(np.asarray(current, dtype=float))])
    if not np.all(np.isfinite(x)):
        raise PredictionError("SPM needs a complete current-value vector")
    if horizon < 0:
        raise PredictionError("horizon must be non-negative")
    return float(1.0 - model.survival.survival(horizon, x))
