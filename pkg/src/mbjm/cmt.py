"""Conditional mean trajectories.

Subjects with an observed event are grouped by event year (stratum ``k``
holds events with ``k - 1 <= T < k``). Within a stratum, the biomarker
values are pooled and averaged per time bin (monthly by default).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import DataError, LongitudinalDataset

MONTH = 1.0 / 12.0


@dataclass(frozen=True)
class CmtRow:
    stratum: int
    bin_start: float
    bin_end: float
    mean: float
    count: int

    @property
    def midpoint(self):
        return 0.5 * (self.bin_start + self.bin_end)


def conditional_mean_trajectory(ds: LongitudinalDataset, biomarker, strata=None,
                                bin_width=MONTH) -> list[CmtRow]:
    """Binned means of ``biomarker`` per event-year stratum.

    ``strata`` defaults to every year containing at least one event. A stratum
    without events (or without observed values) yields a single row with
    ``count == 0`` and a NaN mean.
    """
    if biomarker not in ds.biomarker_names:
        raise DataError(f"unknown biomarker {biomarker!r}")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    m = ds.biomarker_names.index(biomarker)
    ev = ds.delta == 1
    year = np.floor(ds.T).astype(int) + 1
    if strata is None:
        strata = sorted(set(year[ev].tolist()))
    y = ds.Y[:, m]
    rows = []
    for k in strata:
        subj = np.flatnonzero(ev & (year == k))
        sel = np.isin(ds.visit_subject, subj) & np.isfinite(y)
        if not sel.any():
            rows.append(CmtRow(int(k), math.nan, math.nan, math.nan, 0))
            continue
        b = np.floor(ds.visit_time[sel] / bin_width + 1e-9).astype(int)
        vals = y[sel]
        for j in np.unique(b):
            v = vals[b == j]
            rows.append(CmtRow(int(k), j * bin_width, (j + 1) * bin_width, float(v.mean()),
                               len(v)))
    return rows


def cmt_slopes(rows) -> dict:
    """OLS slope of bin mean on bin midpoint per stratum (NaN with < 2 bins)."""
    out = {}
    for k in sorted({r.stratum for r in rows}):
        pts = [(r.midpoint, r.mean) for r in rows if r.stratum == k and r.count > 0]
        if len(pts) < 2:
            out[k] = math.nan
            continue
        x, yv = np.array(pts).T
        out[k] = float(np.polyfit(x, yv, 1)[0])
    return out


def write_cmt_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stratum", "bin_start", "bin_end", "mean", "count"])
        for r in rows:
            w.writerow([r.stratum, "" if math.isnan(r.bin_start) else repr(r.bin_start),
                        "" if math.isnan(r.bin_end) else repr(r.bin_end),
                        "" if math.isnan(r.mean) else repr(r.mean), r.count])
