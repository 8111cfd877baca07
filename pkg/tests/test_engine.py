import copy
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbjm.data import (BiomarkerSpec, DataError, IntegrationSettings, LongitudinalDataset,
                       ModelConfig)
from mbjm.engine import (FittedMbjm, LayerFitError, PredictionError, RiskQuery, dynamic_risk,
                         dynamic_risks, fit_mbjm, layer_designs, query_for_subject,
                         risk_trajectory, select_unified_group, trajectory_loglik)
from mbjm.mixed import LayerDesign, LmmFit
from mbjm.simulation import default_truth
from mbjm.survival import WeibullModel

from ._oracles import dynamic_risk_trapezoid, layer_loglik_plain, trajectory_loglik_plain

EX = ModelConfig()
TP12 = ModelConfig("TP", 12.0)


def _tiny(T, delta, n_visits=2):
    n = len(T)
    vs = np.repeat(np.arange(n), n_visits)
    vt = np.tile(np.linspace(0, 0.5, n_visits), n)
    Y = np.arange(n * n_visits, dtype=float)[:, None]
    return LongitudinalDataset([f"s{i}" for i in range(n)], T, delta, np.zeros((n, 0)), vs, vt,
                               Y, (BiomarkerSpec("y"),), ())


def _no_marker_model(shape=1.0, scale=2.0, variant="EX", tau=math.inf):
    sv = WeibullModel(shape, [math.log(scale)], ())
    return FittedMbjm(sv, [], ModelConfig(variant, tau), (), (), [] if variant == "TP" else None)


def _subject(rng, truth, n_visits=5, s=None):
    """A plausible 7-marker history drawn around the default truth."""
    V = np.array([rng.normal(), float(rng.random() < 0.5)])
    t = np.sort(rng.uniform(0, 3, n_visits))
    t[0] = 0.0
    Y = np.empty((n_visits, 7))
    for m, f in enumerate(truth.layers):
        X = np.column_stack([np.ones(n_visits), t, np.tile(V, (n_visits, 1)), Y[:, :m],
                             np.full(n_visits, 4.0)])
        eta = X @ f.beta
        Y[:, m] = (rng.random(n_visits) < 1 / (1 + np.exp(-eta))) if f.kind == "categorical" \
            else eta + rng.normal(0, math.sqrt(f.sigma2), n_visits)
    return V, t, Y, (t[-1] if s is None else s)


# -------------------------------------------------------------- unified group


def test_unified_group_ex():
    g = select_unified_group(_tiny([2.0, 3.0], [1, 0]), EX)
    assert g.index.tolist() == [0]
    assert g.lts.size == 0


def test_unified_group_tp():
    g = select_unified_group(_tiny([2.0, 13.0, 5.0], [1, 0, 0]), TP12)
    assert g.index.tolist() == [0, 1]
    assert g.lts.tolist() == [1]
    assert g.non_lts.tolist() == [0]


def test_unified_group_empty():
    with pytest.raises(DataError, match="unified group is empty"):
        select_unified_group(_tiny([2.0, 3.0], [0, 0]), EX)


# -------------------------------------------------------------- fitting


def test_fit_without_biomarkers_is_survival_only(rng):
    n = 200
    T = rng.exponential(2.0, n)
    ds = LongitudinalDataset([str(i) for i in range(n)], T, np.ones(n), np.zeros((n, 0)),
                             np.arange(n), np.zeros(n), np.zeros((n, 0)), (), ())
    m = fit_mbjm(ds, EX)
    assert m.layers == [] and m.n_layers == 0
    q = RiskQuery([], [0.0], np.zeros((1, 0)), 0.5, 1.0)
    sv = m.survival
    expect = 1 - sv.survival(1.5, []) / sv.survival(0.5, [])
    assert dynamic_risk(m, q) == pytest.approx(expect, abs=1e-9)


def test_fit_on_simulated_data(ex_fit, ex_data):
    assert ex_fit.n_layers == 7
    assert ex_fit.lts_layers is None
    assert [f.kind for f in ex_fit.layers[:2]] == ["categorical", "categorical"]
    assert all(f.design.include_g for f in ex_fit.layers)
    assert ex_fit.report["unified_group"] == int(ex_data[0].delta.sum())
    names, vals = ex_fit.param_table()
    assert len(names) == len(vals) == len(set(names))


def test_fit_tp_has_lts_layers_without_g(tp_scenario):
    from mbjm.simulation import generate
    train, _ = generate(tp_scenario)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = fit_mbjm(train, ModelConfig("TP", tp_scenario.tau_max))
    assert len(m.lts_layers) == 7
    assert not any(f.design.include_g for f in m.lts_layers)
    assert "identity(T)" not in m.lts_layers[2].design.column_names
    assert m.report["lts"] > 0


def test_layer_error_is_tagged():
    # a binary marker that is always 1 cannot be fitted
    n = 20
    vs = np.repeat(np.arange(n), 3)
    ds = LongitudinalDataset([str(i) for i in range(n)], np.linspace(1, 5, n), np.ones(n),
                             np.zeros((n, 0)), vs, np.tile([0.0, 0.2, 0.4], n),
                             np.ones((3 * n, 1)), (BiomarkerSpec("flag", "categorical"),), ())
    with pytest.raises(LayerFitError) as ei:
        fit_mbjm(ds, EX)
    assert ei.value.layer == 1 and "flag" in str(ei.value)


def test_model_json_roundtrip(ex_fit, tmp_path):
    p = tmp_path / "m.json"
    ex_fit.save(p)
    back = FittedMbjm.load(p)
    np.testing.assert_array_equal(back.param_vector(), ex_fit.param_vector())
    rng = np.random.default_rng(3)
    V, t, Y, s = _subject(rng, ex_fit)
    q = RiskQuery(V, t, Y, s, 2.0)
    assert dynamic_risk(back, q) == dynamic_risk(ex_fit, q)


# -------------------------------------------------------------- trajectory likelihood


def test_trajectory_matches_plain_oracle(truth_ex, rng):
    V, t, Y, s = _subject(rng, truth_ex)
    q = RiskQuery(V, t, Y, s, 1.0)
    for u in (s + 0.1, s + 2.0, s + 10.0):
        got = trajectory_loglik(truth_ex, q, u)
        assert got == pytest.approx(trajectory_loglik_plain(truth_ex, V, t, Y, u), abs=1e-7)


def test_trajectory_is_sum_of_layers(truth_ex, rng):
    V, t, Y, s = _subject(rng, truth_ex)
    q = RiskQuery(V, t, Y, s, 1.0)
    u = s + 1.3
    parts = [layer_loglik_plain(f, t, V, Y[:, :m], Y[:, m], u)
             for m, f in enumerate(truth_ex.layers)]
    assert trajectory_loglik(truth_ex, q, u) == pytest.approx(sum(parts), abs=1e-7)


def test_trajectory_flat_when_u_unused():
    d = LayerDesign("y")
    f = LmmFit(d, [0.0, 0.0, 0.0], [[0.0]], 1.0)
    m = FittedMbjm(WeibullModel(1.0, [0.0]), [f], EX, (BiomarkerSpec("y"),), ())
    q = RiskQuery([], [0.0, 1.0], [[0.3], [-0.2]], 1.0, 1.0)
    vals = trajectory_loglik(m, q, np.array([1.5, 3.0, 50.0]))
    assert np.ptp(vals) == 0.0


def test_trajectory_peaks_where_level_matches():
    # y = b + g(u) + e with identity g: the history at level 4 points at u = 4
    d = LayerDesign("y")
    f = LmmFit(d, [0.0, 0.0, 1.0], [[0.2]], 0.5)
    m = FittedMbjm(WeibullModel(1.0, [0.0]), [f], EX, (BiomarkerSpec("y"),), ())
    q = RiskQuery([], [0.0, 0.5, 1.0], [[3.9], [4.2], [3.9]], 1.0, 1.0)
    grid = np.linspace(1.0, 10.0, 9001)
    ll = trajectory_loglik(m, q, grid)
    assert grid[np.argmax(ll)] == pytest.approx(4.0, abs=2e-3)


def test_missing_value_rejected(truth_ex, rng):
    V, t, Y, s = _subject(rng, truth_ex)
    Y[1, 3] = np.nan
    with pytest.raises(PredictionError, match="complete"):
        dynamic_risk(truth_ex, RiskQuery(V, t, Y, s, 1.0))


def test_query_invariants():
    with pytest.raises(PredictionError):
        RiskQuery([], [0.0, 2.0], [[1.0], [1.0]], 1.0, 1.0)
    with pytest.raises(PredictionError):
        RiskQuery([], [0.0], [[1.0]], 1.0, 0.0)


# -------------------------------------------------------------- dynamic risk


@pytest.mark.parametrize("s", [0.0, 0.7, 3.0, 25.0])
def test_memoryless_identity(s):
    m = _no_marker_model()
    q = RiskQuery([], [], np.zeros((0, 0)), s, 2.0)
    assert abs(dynamic_risk(m, q) - (1 - math.exp(-1))) < 1e-6


def test_huge_horizon_gives_one(truth_ex, rng):
    V, t, Y, s = _subject(rng, truth_ex)
    scale = float(np.squeeze(truth_ex.survival.scale(V)))
    assert dynamic_risk(truth_ex, RiskQuery(V, t, Y, s, 1e4 * scale)) == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_risk_matches_trapezoid_oracle(truth_ex, seed):
    rng = np.random.default_rng(seed)
    V, t, Y, s = _subject(rng, truth_ex, n_visits=4 + seed)
    for h in (1.0, 3.0):
        got = dynamic_risk(truth_ex, RiskQuery(V, t, Y, s, h))
        ref = dynamic_risk_trapezoid(truth_ex, V, t, Y, s, h)
        assert got == pytest.approx(ref, rel=1e-5)


def test_risk_self_convergence(truth_ex, rng):
    V, t, Y, s = _subject(rng, truth_ex)
    q = RiskQuery(V, t, Y, s, 2.0)
    base = dynamic_risk(truth_ex, q)
    fine = dynamic_risk(truth_ex, q, IntegrationSettings(gl_order=16, initial_panels=8,
                                                         max_nodes=16384))
    assert abs(base - fine) < 1e-6


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), s_off=st.floats(0.0, 2.0))
def test_risk_bounded_and_monotone_in_horizon(seed, s_off):
    truth = default_truth("EX")
    rng = np.random.default_rng(seed)
    V, t, Y, s = _subject(rng, truth)
    r = dynamic_risks(truth, RiskQuery(V, t, Y, s + s_off, 1.0), [0.25, 0.5, 1, 2, 4, 8, 30])
    assert np.all((r >= 0) & (r <= 1))
    assert np.all(np.diff(r) >= -1e-12)


def test_dynamic_risks_match_single_calls(truth_ex, rng):
    V, t, Y, s = _subject(rng, truth_ex)
    hs = [1.0, 3.0, 0.5]
    many = dynamic_risks(truth_ex, RiskQuery(V, t, Y, s, 1.0), hs)
    one = [dynamic_risk(truth_ex, RiskQuery(V, t, Y, s, h)) for h in hs]
    np.testing.assert_allclose(many, one, rtol=1e-9)


def _no_signal(model):
    m = copy.deepcopy(model)
    for f in m.layers:
        f.beta[-1] = 0.0
    if m.lts_layers is not None:
        m.lts_layers = []
        for f in m.layers:
            d = LayerDesign(f.design.biomarker, f.kind, f.design.covariates, f.design.previous,
                            False)
            g = copy.deepcopy(f)
            g.design = d
            g.beta = f.beta[:-1].copy()
            m.lts_layers.append(g)
    return m


@pytest.mark.parametrize("variant", ["EX", "TP"])
def test_no_signal_reduces_to_survival(variant, rng):
    truth = default_truth(variant, 6.0 if variant == "TP" else None)
    m = _no_signal(truth)
    sv = m.survival
    V, t, Y, s = _subject(rng, truth)
    for h in (1.0, 4.0, 9.0):
        r = dynamic_risk(m, RiskQuery(V, t, Y, s, h))
        expect = 1 - sv.survival(s + h, V) / sv.survival(s, V)
        assert r == pytest.approx(expect, abs=1e-6)


def test_ex_and_tp_agree_with_distant_tau(truth_ex, rng):
    V, t, Y, s = _subject(rng, truth_ex)
    tau = float(truth_ex.survival.survival_quantile(1e-3, V)) + 1.0
    tp = default_truth("TP", tau)
    tp.layers = copy.deepcopy(truth_ex.layers)
    for h in (1.0, 3.0):
        a = dynamic_risk(truth_ex, RiskQuery(V, t, Y, s, h))
        b = dynamic_risk(tp, RiskQuery(V, t, Y, s, h))
        assert abs(a - b) < 0.01


def test_tp_after_tau_is_lts_survival_ratio(rng):
    tp = default_truth("TP", 6.0)
    V, t, Y, _ = _subject(rng, tp)
    sv = tp.survival
    r = dynamic_risk(tp, RiskQuery(V, t, Y, 7.0, 2.0))
    assert r == pytest.approx(1 - sv.survival(9.0, V) / sv.survival(7.0, V), rel=1e-12)


def test_no_history_is_survival_conditional(truth_ex):
    V = np.array([0.3, 1.0])
    r = dynamic_risk(truth_ex, RiskQuery(V, [], np.zeros((0, 7)), 1.0, 2.0))
    sv = truth_ex.survival
    assert r == pytest.approx(1 - sv.survival(3.0, V) / sv.survival(1.0, V), abs=1e-8)


def test_worse_history_means_higher_risk(truth_ex, rng):
    # bilirubin and prothrombin fall with g(T): high values point to early events
    V, t, Y, s = _subject(rng, truth_ex)
    hi, lo = Y.copy(), Y.copy()
    hi[:, 2:4] += 3.0
    lo[:, 2:4] -= 3.0
    r_hi = dynamic_risk(truth_ex, RiskQuery(V, t, hi, s, 2.0))
    r_lo = dynamic_risk(truth_ex, RiskQuery(V, t, lo, s, 2.0))
    assert r_hi > r_lo


# -------------------------------------------------------------- risk trajectory


def test_risk_trajectory_single_visit(truth_ex):
    out = risk_trajectory(truth_ex, [0.0, 1.0], [0.0], np.ones((1, 7)), 3.0)
    assert out.shape == (1, 2) and out[0, 0] == 0.0


def test_risk_trajectory_uses_growing_history(truth_ex, rng):
    V, t, Y, _ = _subject(rng, truth_ex, n_visits=4)
    out = risk_trajectory(truth_ex, V, t, Y, 3.0)
    np.testing.assert_array_equal(out[:, 0], t)
    for j in range(4):
        q = RiskQuery(V, t[:j + 1], Y[:j + 1], t[j], 3.0)
        assert out[j, 1] == dynamic_risk(truth_ex, q)
    with pytest.raises(PredictionError):
        risk_trajectory(truth_ex, V, [], np.zeros((0, 7)), 3.0)


def test_query_for_subject_truncates(ex_data):
    ds = ex_data[0]
    i = int(np.argmax(np.bincount(ds.visit_subject)))
    t, _ = ds.visits_of(i)
    s = float(t[len(t) // 2])
    q = query_for_subject(ds, i, s, 1.0)
    assert q.times.max() <= s and len(q.times) == len(t) // 2 + 1


def test_layer_designs_order():
    cfg = ModelConfig()
    d = layer_designs((BiomarkerSpec("a", "categorical"), BiomarkerSpec("b")), ("age",), cfg)
    assert d[0].previous == () and d[1].previous == ("a",)
    assert d[1].column_names[-1] == "identity(T)"
