"""PBC sequential-visit data in the layout used throughout the package.

Two public sources are accepted: the ``pbcseq`` table of the R ``survival``
package (times in days, numeric codes) and the ``pbc2`` export shipped with
``JM``/``joineRML`` (times in years, Yes/No factors). Either can be given as a
CSV path. Without a path, ``$MBJM_PBC_CSV`` is tried and then the optional
``rdatasets`` package.

The terminal event is the composite of death or liver transplant.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path

import numpy as np

from .data import (CATEGORICAL, CONTINUOUS, BiomarkerSpec, DataError, LongitudinalDataset,
                   ModelConfig, Transform)

DAYS_PER_YEAR = 365.25
PBC_TAU_MAX = 12.0
PBC_COVARIATES = ("age", "female")

PBC_BIOMARKERS = (
    BiomarkerSpec("ascites", CATEGORICAL, layer_index=1),
    BiomarkerSpec("hepatomegaly", CATEGORICAL, layer_index=2),
    BiomarkerSpec("bilirubin", CONTINUOUS, Transform("log"), 3),
    BiomarkerSpec("prothrombin", CONTINUOUS, Transform("affine_power", 0.1, 0.0, -4.0), 4),
    BiomarkerSpec("albumin", CONTINUOUS, Transform("log"), 5),
    BiomarkerSpec("alkaline", CONTINUOUS, Transform("log"), 6),
    BiomarkerSpec("sgot", CONTINUOUS, Transform("log"), 7),
)

# source column names per layout, in PBC_BIOMARKERS order
_PBCSEQ = {"id": "id", "time": "day", "T": "futime", "status": "status", "age": "age",
           "sex": "sex", "biomarkers": ("ascites", "hepato", "bili", "protime", "albumin",
                                        "alk.phos", "ast")}
_PBC2 = {"id": "id", "time": "year", "T": "years", "status": "status", "age": "age",
         "sex": "sex", "biomarkers": ("ascites", "hepatomegaly", "serBilir", "prothrombin",
                                      "albumin", "alkaline", "SGOT")}

ENV_VAR = "MBJM_PBC_CSV"


def pbc_config(variant="EX", **kw) -> ModelConfig:
    """Final PBC specification: random intercepts, identity g, tau_max 12 for TP."""
    tau = PBC_TAU_MAX if variant == "TP" else math.inf
    return ModelConfig(variant=variant, tau_max=tau, **kw)


def _code(v, col):
    """Numeric code for a 0/1 or Yes/No (or f/m, female/male) cell; NaN if missing."""
    if v is None:
        return math.nan
    if isinstance(v, (int, float, np.integer, np.floating)):
        return float(v)
    s = str(v).strip().lower()
    if s in ("", "na", "nan"):
        return math.nan
    table = {"yes": 1.0, "no": 0.0, "f": 1.0, "female": 1.0, "m": 0.0, "male": 0.0,
             "dead": 2.0, "transplanted": 1.0, "alive": 0.0}
    if s in table:
        return table[s]
    try:
        return float(s)
    except ValueError:
        raise DataError(f"column {col!r}: cannot interpret {v!r}") from None


def _event(status, col):
    code = _code(status, col)
    if math.isnan(code):
        raise DataError(f"column {col!r}: missing status")
    return 1.0 if code > 0 else 0.0


def from_table(rows, layout=None) -> LongitudinalDataset:
    """Build the dataset from an iterable of dict rows in either source layout.

    Visit rows at or after the subject's follow-up end are dropped. Biomarker
    transforms of ``PBC_BIOMARKERS`` are applied here.
    """
    rows = list(rows)
    if not rows:
        raise DataError("empty PBC table")
    cols = set(rows[0])
    if layout is None:
        layout = _PBC2 if "years" in cols else _PBCSEQ
    needed = [layout["id"], layout["time"], layout["T"], layout["status"], layout["age"],
              layout["sex"], *layout["biomarkers"]]
    for c in needed:
        if c not in cols:
            raise DataError(f"column {c!r} not found in PBC table")
    scale = 1.0 / DAYS_PER_YEAR if layout is _PBCSEQ else 1.0
    recs = []
    for r in rows:
        t = _code(r[layout["time"]], layout["time"]) * scale
        T = _code(r[layout["T"]], layout["T"]) * scale
        if math.isnan(t) or t >= T:
            continue
        y = [_code(r[c], c) for c in layout["biomarkers"]]
        recs.append((str(r[layout["id"]]).strip(), t, T,
                     _event(r[layout["status"]], layout["status"]),
                     _code(r[layout["age"]], layout["age"]),
                     _code(r[layout["sex"]], layout["sex"]), y))
    return from_records_sorted(recs)


def from_records_sorted(recs) -> LongitudinalDataset:
    order: dict[str, int] = {}
    T, d, V = [], [], []
    vs, vt, Y = [], [], []
    for sid, t, Ti, ev, age, female, y in recs:
        if sid not in order:
            order[sid] = len(T)
            T.append(Ti)
            d.append(ev)
            V.append([age, female])
        vs.append(order[sid])
        vt.append(t)
        Y.append(y)
    Y = np.array(Y, dtype=float)
    for k, b in enumerate(PBC_BIOMARKERS):
        if not b.categorical:
            Y[:, k] = b.transform.apply(Y[:, k])
    ids = sorted(order, key=order.get)
    return LongitudinalDataset(ids, T, d, np.array(V, dtype=float), vs, vt, Y,
                               PBC_BIOMARKERS, PBC_COVARIATES)


def read_pbc_csv(path) -> LongitudinalDataset:
    with Path(path).open(newline="") as fh:
        return from_table(csv.DictReader(fh))


def load_pbc(path=None) -> LongitudinalDataset:
    """Load PBC from ``path``, ``$MBJM_PBC_CSV`` or ``rdatasets`` (in that order).

    Raises ``FileNotFoundError`` when no source is available.
    """
    path = path or os.environ.get(ENV_VAR)
    if path:
        return read_pbc_csv(path)
    try:
        import rdatasets
    except ImportError:
        raise FileNotFoundError(
            f"no PBC source: pass a CSV path, set {ENV_VAR}, or install rdatasets") from None
    df = rdatasets.data("survival", "pbcseq")
    return from_table(df.to_dict("records"), _PBCSEQ)
