"""Longitudinal survival data containers, CSV ingestion and fold splitting.

A :class:`LongitudinalDataset` stores one row per subject-visit in flat numpy
arrays sorted by (subject, time), together with the per-subject survival
tuple ``(T, delta)`` and baseline covariates ``V``. All arrays are read-only,
so a dataset can be shared freely between threads.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


class DataError(ValueError):
    """Raised for malformed input files or datasets violating an invariant."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    """Monotone ingestion transform.

    ``kind`` is one of ``identity``, ``log``, ``sqrt`` or ``affine_power``;
    the last maps ``x -> (scale * x + offset) ** power``.
    """

    kind: str = "identity"
    scale: float = 1.0
    offset: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "log", "sqrt", "affine_power"):
            raise DataError(f"unknown transform {self.kind!r}")
        if self.kind == "affine_power" and self.power == 0:
            raise DataError("affine_power transform needs a non-zero power")

    @classmethod
    def parse(cls, spec) -> "Transform":
        if spec is None:
            return cls()
        if isinstance(spec, Transform):
            return spec
        if isinstance(spec, str):
            return cls(kind=spec)
        return cls(**spec)

    def to_json(self):
        if self.kind == "affine_power":
            return {"kind": self.kind, "scale": self.scale, "offset": self.offset,
                    "power": self.power}
        return self.kind

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "identity":
                return x
            if self.kind == "log":
                return np.log(x)
            if self.kind == "sqrt":
                return np.sqrt(x)
            return (self.scale * x + self.offset) ** self.power

    def invert(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "identity":
            return y
        if self.kind == "log":
            return np.exp(y)
        if self.kind == "sqrt":
            return y ** 2
        return (y ** (1.0 / self.power) - self.offset) / self.scale


G_TRANSFORMS = {
    "identity": lambda u: np.asarray(u, dtype=float),
    "log": lambda u: np.log(np.asarray(u, dtype=float)),
    "sqrt": lambda u: np.sqrt(np.asarray(u, dtype=float)),
}


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiomarkerSpec:
    name: str
    kind: str = CONTINUOUS
    transform: Transform = field(default_factory=Transform)
    layer_index: int = 1
    column: str | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise DataError(f"biomarker {self.name!r}: unknown kind {self.kind!r}")
        if self.layer_index < 1:
            raise DataError(f"biomarker {self.name!r}: layer_index must be >= 1")
        object.__setattr__(self, "transform", Transform.parse(self.transform))

    @property
    def source_column(self) -> str:
        return self.column or self.name

    @property
    def categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def to_json(self):
        out = {"name": self.name, "kind": self.kind, "transform": self.transform.to_json(),
               "layer": self.layer_index}
        if self.column and self.column != self.name:
            out["column"] = self.column
        return out

    @classmethod
    def from_json(cls, d):
        return cls(name=d["name"], kind=d.get("kind", CONTINUOUS),
                   transform=Transform.parse(d.get("transform")),
                   layer_index=int(d.get("layer", d.get("layer_index", 1))),
                   column=d.get("column"))


@dataclass(frozen=True)
class VisitRow:
    time: float
    values: tuple


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    baseline_covariates: np.ndarray
    observed_time: float
    event_indicator: int
    visits: tuple


@dataclass(frozen=True)
class IntegrationSettings:
    """Composite Gauss-Legendre settings for the risk integrals."""

    gl_order: int = 8
    initial_panels: int = 4
    rel_tol: float = 1e-6
    max_nodes: int = 4096
    tail_mass: float = 1e-10


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "EX"
    tau_max: float = math.inf
    g_transform: str = "identity"
    random_effects: str = "intercept"
    quadrature_nodes: int = 15
    integration: IntegrationSettings = field(default_factory=IntegrationSettings)
    bootstrap_reps: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.variant not in ("EX", "TP"):
            raise DataError(f"variant must be EX or TP, got {self.variant!r}")
        tau = math.inf if self.tau_max is None else float(self.tau_max)
        if self.variant == "EX" and math.isfinite(tau):
            warnings.warn("tau_max is ignored for the EX variant", stacklevel=3)
            tau = math.inf
        if self.variant == "TP" and not (math.isfinite(tau) and tau > 0):
            raise DataError("TP variant requires a finite positive tau_max")
        object.__setattr__(self, "tau_max", tau)
        if self.g_transform not in G_TRANSFORMS:
            raise DataError(f"unknown g_transform {self.g_transform!r}")
        if self.random_effects not in ("intercept", "intercept+slope"):
            raise DataError(f"unknown random_effects {self.random_effects!r}")
        if self.quadrature_nodes < 5:
            raise DataError("quadrature_nodes must be >= 5")
        if self.bootstrap_reps < 1:
            raise DataError("bootstrap_reps must be >= 1")
        if isinstance(self.integration, dict):
            object.__setattr__(self, "integration", IntegrationSettings(**self.integration))

    def g(self, u):
        return G_TRANSFORMS[self.g_transform](u)

    def to_json(self):
        d = asdict(self)
        d["tau_max"] = None if math.isinf(self.tau_max) else self.tau_max
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "integration" in d and isinstance(d["integration"], dict):
            d["integration"] = IntegrationSettings(**d["integration"])
        return cls(**d)


def _readonly(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


class LongitudinalDataset:
    """Immutable long-format dataset.

    Parameters
    ----------
    subject_ids : sequence of str
    T, delta : (n,) arrays
        Observed time ``min(T_true, C)`` and event indicator.
    V : (n, p) array
        Baseline covariates.
    visit_subject : (N,) int array
        Subject index of every visit row.
    visit_time : (N,) array
    Y : (N, M) array
        Biomarker values after transformation, NaN where missing. Columns
        follow ``biomarkers`` ordered by ``layer_index``.
    """

    def __init__(self, subject_ids, T, delta, V, visit_subject, visit_time, Y,
                 biomarkers: Sequence[BiomarkerSpec], covariate_names: Sequence[str]):
        n = len(subject_ids)
        V = np.asarray(V, dtype=float).reshape(n, -1)
        if V.shape[1] != len(covariate_names):
            raise DataError("covariate matrix width does not match covariate_names")
        Y = np.asarray(Y, dtype=float).reshape(len(visit_time), len(biomarkers))
        order = sorted(range(len(biomarkers)), key=lambda k: biomarkers[k].layer_index)
        biomarkers = [biomarkers[k] for k in order]
        Y = Y[:, order]
        vs = np.asarray(visit_subject, dtype=np.int64)
        vt = np.asarray(visit_time, dtype=float)
        idx = np.lexsort((vt, vs))
        self.subject_ids = tuple(str(s) for s in subject_ids)
        self.T = _readonly(np.asarray(T, dtype=float))
        self.delta = _readonly(np.asarray(delta, dtype=np.int64))
        self.V = _readonly(V)
        self.visit_subject = _readonly(vs[idx])
        self.visit_time = _readonly(vt[idx])
        self.Y = _readonly(Y[idx])
        self.biomarkers = tuple(biomarkers)
        self.covariate_names = tuple(covariate_names)
        counts = np.bincount(self.visit_subject, minlength=n) if len(vs) else np.zeros(n, int)
        self.offsets = _readonly(np.concatenate([[0], np.cumsum(counts)]))

    # basic shape -----------------------------------------------------------
    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_biomarkers(self) -> int:
        return len(self.biomarkers)

    @property
    def n_events(self) -> int:
        return int(self.delta.sum())

    @property
    def biomarker_names(self):
        return tuple(b.name for b in self.biomarkers)

    def __len__(self):
        return self.n_subjects

    def __repr__(self):
        return (f"LongitudinalDataset(n={self.n_subjects}, visits={len(self.visit_time)}, "
                f"events={self.n_events}, biomarkers={list(self.biomarker_names)})")

    def visit_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def visits_of(self, i: int):
        sl = self.visit_slice(i)
        return self.visit_time[sl], self.Y[sl]

    @property
    def subjects(self) -> list[SubjectRecord]:
        out = []
        for i, sid in enumerate(self.subject_ids):
            t, y = self.visits_of(i)
            visits = tuple(VisitRow(float(tt), tuple(float(v) for v in yy)) for tt, yy in zip(t, y))
            out.append(SubjectRecord(sid, self.V[i], float(self.T[i]), int(self.delta[i]), visits))
        return out

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], biomarkers, covariate_names):
        records = list(records)
        ids, T, d, V, vs, vt, Y = [], [], [], [], [], [], []
        for i, r in enumerate(records):
            ids.append(r.subject_id)
            T.append(r.observed_time)
            d.append(r.event_indicator)
            V.append(np.asarray(r.baseline_covariates, dtype=float))
            for v in r.visits:
                vs.append(i)
                vt.append(v.time)
                Y.append(v.values)
        M = len(biomarkers)
        return cls(ids, T, d, np.array(V).reshape(len(ids), len(covariate_names)), vs, vt,
                   np.array(Y, dtype=float).reshape(len(vt), M), biomarkers, covariate_names)

    # derived datasets -------------------------------------------------------
    def subset(self, index) -> "LongitudinalDataset":
        """Dataset restricted to subjects ``index`` (in that order).

        Repeated indices (bootstrap resamples) become distinct subjects whose
        ids get a ``#k`` suffix.
        """
        index = np.asarray(index, dtype=np.int64)
        seen: dict[int, int] = {}
        ids, rows, vs = [], [], []
        for new, i in enumerate(index):
            k = seen.get(int(i), 0)
            seen[int(i)] = k + 1
            ids.append(self.subject_ids[i] if k == 0 else f"{self.subject_ids[i]}#{k}")
            sl = self.visit_slice(int(i))
            r = np.arange(sl.start, sl.stop)
            rows.append(r)
            vs.append(np.full(len(r), new))
        rows = np.concatenate(rows) if rows else np.zeros(0, int)
        vs = np.concatenate(vs) if vs else np.zeros(0, int)
        return LongitudinalDataset(ids, self.T[index], self.delta[index], self.V[index], vs,
                                   self.visit_time[rows], self.Y[rows], self.biomarkers,
                                   self.covariate_names)

    def reorder_biomarkers(self, names: Sequence[str]) -> "LongitudinalDataset":
        """Same data with layers assigned in the order ``names``."""
        if sorted(names) != sorted(self.biomarker_names):
            raise DataError("layer order must be a permutation of the biomarker names")
        pos = {b.name: k for k, b in enumerate(self.biomarkers)}
        specs = [BiomarkerSpec(b.name, b.kind, b.transform, j + 1, b.column)
                 for j, b in enumerate(self.biomarkers[pos[nm]] for nm in names)]
        Y = self.Y[:, [pos[nm] for nm in names]]
        return LongitudinalDataset(self.subject_ids, self.T, self.delta, self.V, self.visit_subject,
                                   self.visit_time, Y, specs, self.covariate_names)

    def truncate_history(self, s: float) -> "LongitudinalDataset":
        """Keep only visits at times <= s (survival tuple untouched)."""
        keep = self.visit_time <= s
        return LongitudinalDataset(self.subject_ids, self.T, self.delta, self.V,
                                   self.visit_subject[keep], self.visit_time[keep], self.Y[keep],
                                   self.biomarkers, self.covariate_names)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    checked: dict
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, invariant, subject, detail=""):
        self.violations.append({"invariant": invariant, "subject": subject, "detail": detail})

    def counts(self) -> dict:
        out = {k: 0 for k in self.checked}
        for v in self.violations:
            out[v["invariant"]] = out.get(v["invariant"], 0) + 1
        return out

    def __str__(self):
        if self.ok:
            return "dataset valid"
        return "\n".join(f"{v['invariant']}: subject {v['subject']} {v['detail']}".rstrip()
                         for v in self.violations)


INVARIANTS = (
    "positive_time", "event_indicator", "visit_before_event", "visit_nonnegative",
    "visit_times_increasing", "finite_continuous", "binary_categorical",
    "covariates_finite", "layer_indices", "has_event",
)


def validate_dataset(ds: LongitudinalDataset) -> ValidationReport:
    """Report every invariant violation; never raises, never mutates."""
    rep = ValidationReport(checked={k: True for k in INVARIANTS})
    layers = sorted(b.layer_index for b in ds.biomarkers)
    if layers != list(range(1, ds.n_biomarkers + 1)):
        rep.add("layer_indices", None, f"layer indices {layers}")
    if ds.n_events == 0:
        rep.add("has_event", None, "no subject has an observed event")
    cat = np.array([b.categorical for b in ds.biomarkers], dtype=bool)
    for i, sid in enumerate(ds.subject_ids):
        T = ds.T[i]
        if not (T > 0):
            rep.add("positive_time", sid, f"T={T}")
        if ds.delta[i] not in (0, 1):
            rep.add("event_indicator", sid, f"delta={ds.delta[i]}")
        if not np.all(np.isfinite(ds.V[i])):
            rep.add("covariates_finite", sid)
        t, y = ds.visits_of(i)
        if len(t) == 0:
            continue
        if np.any(t >= T):
            rep.add("visit_before_event", sid, f"visit at {t[t >= T][0]} >= T={T}")
        if np.any(t < 0):
            rep.add("visit_nonnegative", sid)
        if np.any(np.diff(t) <= 0):
            rep.add("visit_times_increasing", sid, "duplicated or unordered visit times")
        yc = y[:, ~cat]
        if np.any(np.isinf(yc)):
            rep.add("finite_continuous", sid)
        yk = y[:, cat]
        bad = ~np.isnan(yk) & (yk != 0) & (yk != 1)
        if np.any(bad):
            rep.add("binary_categorical", sid, f"value {yk[bad][0]}")
    return rep


# ---------------------------------------------------------------------------
# CSV / JSON I/O
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMap:
    subject: str = "subject_id"
    time: str = "time"
    event_time: str = "event_time"
    event: str = "event_indicator"
    covariates: tuple = ()
    biomarkers: tuple = ()
    time_scale: float = 1.0

    @classmethod
    def from_json(cls, d):
        cols = d.get("columns", {})
        return cls(subject=cols.get("subject", "subject_id"), time=cols.get("time", "time"),
                   event_time=cols.get("event_time", "event_time"),
                   event=cols.get("event", "event_indicator"),
                   covariates=tuple(d.get("covariates", ())),
                   biomarkers=tuple(BiomarkerSpec.from_json(b) for b in d.get("biomarkers", ())),
                   time_scale=float(d.get("time_scale", 1.0)))

    def to_json(self):
        return {"columns": {"subject": self.subject, "time": self.time,
                            "event_time": self.event_time, "event": self.event},
                "covariates": list(self.covariates),
                "biomarkers": [b.to_json() for b in self.biomarkers],
                "time_scale": self.time_scale}


def load_config(path):
    """Read a JSON config file; returns ``(ColumnMap, ModelConfig)``."""
    with open(path) as fh:
        d = json.load(fh)
    return ColumnMap.from_json(d), ModelConfig.from_json(d.get("model", {}))


def _float(cell, line, col):
    cell = cell.strip()
    if cell == "" or cell.upper() in ("NA", "NAN"):
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"column {col!r}: cannot parse {cell!r} as a number", line) from None


def load_csv_long(path, schema: ColumnMap, strict=True) -> LongitudinalDataset:
    """Read a long-format CSV (one row per subject-visit).

    Transforms declared on the biomarkers are applied at ingestion and time
    columns are multiplied by ``schema.time_scale``. With ``strict`` the
    dataset is validated and the first violation raised as :class:`DataError`.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        pos = {h: k for k, h in enumerate(header)}
        needed = [schema.subject, schema.time, schema.event_time, schema.event,
                  *schema.covariates, *(b.source_column for b in schema.biomarkers)]
        for c in needed:
            if c not in pos:
                raise DataError(f"column {c!r} not found in {path.name}")
        subj: dict[str, int] = {}
        ids, T, d, V = [], [], [], []
        vs, vt, Y = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            sid = row[pos[schema.subject]].strip()
            et = _float(row[pos[schema.event_time]], line, schema.event_time) * schema.time_scale
            ev = _float(row[pos[schema.event]], line, schema.event)
            cov = [_float(row[pos[c]], line, c) for c in schema.covariates]
            if sid not in subj:
                subj[sid] = len(ids)
                ids.append(sid)
                T.append(et)
                d.append(ev)
                V.append(cov)
            else:
                k = subj[sid]
                if T[k] != et or d[k] != ev:
                    raise ParseError(f"subject {sid}: inconsistent event time/indicator", line)
            vs.append(subj[sid])
            vt.append(_float(row[pos[schema.time]], line, schema.time) * schema.time_scale)
            Y.append([_float(row[pos[b.source_column]], line, b.source_column)
                      for b in schema.biomarkers])
    if not ids:
        raise ParseError("no data rows", 2)
    for k, ev in enumerate(d):
        if ev not in (0.0, 1.0):
            raise DataError(f"subject {ids[k]}: event indicator must be 0 or 1, got {ev}")
    Y = np.array(Y, dtype=float).reshape(len(vt), len(schema.biomarkers))
    raw = Y.copy()
    for k, b in enumerate(schema.biomarkers):
        if b.categorical:
            col = raw[:, k]
            bad = ~np.isnan(col) & (col != 0) & (col != 1)
            if np.any(bad):
                r = int(np.flatnonzero(bad)[0])
                raise DataError(f"subject {ids[vs[r]]}: categorical biomarker {b.name!r} "
                                f"has value {col[r]} (expected 0/1)")
        else:
            Y[:, k] = b.transform.apply(raw[:, k])
    ds = LongitudinalDataset(ids, T, d, np.array(V, dtype=float).reshape(len(ids), -1), vs, vt, Y,
                             schema.biomarkers, schema.covariates)
    if strict:
        rep = validate_dataset(ds)
        if not rep.ok:
            v = rep.violations[0]
            raise DataError(f"{v['invariant']}: subject {v['subject']} {v['detail']}".rstrip())
    return ds


def write_csv_long(ds: LongitudinalDataset, path, raw=True, schema: ColumnMap | None = None):
    """Write the dataset in long format.

    With ``raw`` the ingestion transforms are inverted, so that loading the
    file with the same schema reproduces the dataset.
    """
    schema = schema or ColumnMap(covariates=ds.covariate_names, biomarkers=ds.biomarkers)
    Y = np.array(ds.Y, copy=True)
    if raw:
        for k, b in enumerate(ds.biomarkers):
            if not b.categorical:
                Y[:, k] = b.transform.invert(Y[:, k])
    scale = schema.time_scale
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([schema.subject, schema.time, schema.event_time, schema.event,
                    *ds.covariate_names, *(b.source_column for b in ds.biomarkers)])
        for r in range(len(ds.visit_time)):
            i = ds.visit_subject[r]
            w.writerow([ds.subject_ids[i], repr(float(ds.visit_time[r] / scale)),
                        repr(float(ds.T[i] / scale)),
                        int(ds.delta[i]), *(repr(float(v)) for v in ds.V[i]),
                        *("" if np.isnan(v) else repr(float(v)) for v in Y[r])])


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def split_folds(ds_or_n, k: int, seed=0):
    """Subject-level k-fold partition.

    Returns a list of ``(train_index, test_index)`` pairs. Fold sizes differ
    by at most one and the partition depends only on ``(n, k, seed)``.
    """
    n = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else len(ds_or_n)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot split {n} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    tests = [np.sort(p) for p in np.array_split(perm, k)]
    out = []
    for f in range(k):
        train = np.sort(np.concatenate([tests[g] for g in range(k) if g != f]))
        out.append((train, tests[f]))
    return out
