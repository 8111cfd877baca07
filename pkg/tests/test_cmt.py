import csv
import math

import numpy as np
import pytest

from mbjm.cmt import MONTH, cmt_slopes, conditional_mean_trajectory, write_cmt_csv
from mbjm.data import BiomarkerSpec, DataError, LongitudinalDataset


def _trend_data(rng, n=400, slope=0.3):
    T = rng.uniform(0.5, 6.0, n)
    vs, vt, Y = [], [], []
    for i in range(n):
        t = np.arange(0.0, T[i], 0.25)
        vs.extend([i] * len(t))
        vt.extend(t)
        Y.extend(1.0 + slope * t + rng.normal(0, 0.5, len(t)))
    return LongitudinalDataset([str(i) for i in range(n)], T, np.ones(n), np.zeros((n, 0)), vs,
                               vt, np.array(Y)[:, None], (BiomarkerSpec("y"),), ())


def test_linear_trend_recovered(rng):
    ds = _trend_data(rng)
    rows = conditional_mean_trajectory(ds, "y")
    slopes = cmt_slopes(rows)
    assert set(slopes) == {1, 2, 3, 4, 5, 6}
    # the first stratum spans at most a year of visits; pool the rest
    x = np.array([r.midpoint for r in rows])
    y = np.array([r.mean for r in rows])
    assert np.polyfit(x, y, 1)[0] == pytest.approx(0.3, abs=0.05)
    for k in (3, 4, 5, 6):
        assert slopes[k] == pytest.approx(0.3, abs=0.05)


def test_single_observation():
    ds = LongitudinalDataset(["a"], [2.5], [1], np.zeros((1, 0)), [0], [0.4], [[7.25]],
                             (BiomarkerSpec("y"),), ())
    rows = conditional_mean_trajectory(ds, "y")
    assert len(rows) == 1
    r = rows[0]
    assert r.stratum == 3 and r.count == 1 and r.mean == 7.25
    assert r.bin_start <= 0.4 < r.bin_end and r.bin_end - r.bin_start == pytest.approx(MONTH)


def test_empty_stratum_and_censored_subjects(tmp_path):
    ds = LongitudinalDataset(["a", "b"], [1.5, 3.0], [1, 0], np.zeros((2, 0)), [0, 1],
                             [0.0, 0.0], [[1.0], [2.0]], (BiomarkerSpec("y"),), ())
    rows = conditional_mean_trajectory(ds, "y", strata=[2, 4])
    assert [(r.stratum, r.count) for r in rows] == [(2, 1), (4, 0)]
    assert math.isnan(rows[1].mean)
    write_cmt_csv(rows, tmp_path / "c.csv")
    out = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert out[1]["count"] == "0" and out[1]["mean"] == ""
    # the censored subject never contributes
    assert all(r.mean != 2.0 for r in rows)


def test_missing_values_ignored_and_unknown_marker():
    ds = LongitudinalDataset(["a"], [0.9], [1], np.zeros((1, 0)), [0, 0], [0.0, 0.01],
                             [[1.0], [np.nan]], (BiomarkerSpec("y"),), ())
    rows = conditional_mean_trajectory(ds, "y")
    assert rows[0].count == 1
    with pytest.raises(DataError):
        conditional_mean_trajectory(ds, "zzz")
