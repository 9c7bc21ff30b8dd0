import json
import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from twophase.exceptions import ConfigError
from twophase.models import SelectionModel
from twophase.simulation import (
    PRESETS,
    ScenarioConfig,
    generate_phase1,
    phase2_sample,
    preset,
    run_replications,
    scenario_models,
    simulate_dataset,
    summarize,
    synthetic_survey,
)

CUTS = (-0.44, 0.44)


def _tertile_pieces():
    return [(-np.inf, CUTS[0], 0.0), (CUTS[0], CUTS[1], 1.0), (CUTS[1], np.inf, 2.0)]


def _p_case_expensive_logistic(beta=(-4.0, 1.0, 1.0), rho=0.1):
    """P(Y = 1) by integrating over the latent covariate and Z | latent."""
    sd = math.sqrt(1 - rho ** 2)
    total = 0.0
    for lo, hi, xcat in _tertile_pieces():
        def inner(t):
            f = lambda z: expit(beta[0] + beta[1] * xcat + beta[2] * z) * stats.norm.pdf(z, rho * t, sd)
            return integrate.quad(f, rho * t - 12 * sd, rho * t + 12 * sd, epsabs=0, epsrel=1e-11)[0]
        total += integrate.quad(lambda t: inner(t) * stats.norm.pdf(t), max(lo, -12), min(hi, 12),
                                epsabs=0, epsrel=1e-10)[0]
    return total


# exact population value of the expensive-covariate logistic design at the true beta
P_CASE_TABLE1 = 0.0873837


def test_case_fraction_oracle_is_frozen():
    assert _p_case_expensive_logistic() == pytest.approx(P_CASE_TABLE1, abs=1e-7)


def test_case_fraction_matches_oracle():
    cfg = preset("table1")
    d = generate_phase1(cfg, 0)
    se = math.sqrt(P_CASE_TABLE1 * (1 - P_CASE_TABLE1) / cfg.n)
    assert abs(d.y.mean() - P_CASE_TABLE1) < 3 * se


def test_x_margins_are_tertiles():
    cfg = preset("table1")
    d = generate_phase1(cfg, 1)
    p = stats.norm.cdf(0.44) - stats.norm.cdf(-0.44)
    expected = np.array([stats.norm.cdf(-0.44), p, stats.norm.sf(0.44)])
    frac = np.bincount(d.x[:, 0].astype(int), minlength=3) / cfg.n
    assert np.all(np.abs(frac - expected) < 3 * np.sqrt(expected * (1 - expected) / cfg.n))
    # +-0.44 are rounded tertiles: the middle cell has mass 0.340
    assert np.all(np.abs(expected - 1 / 3) < 0.01)


def test_zero_correlation():
    cfg = preset("table2", rho=0.0)
    d = generate_phase1(cfg, 0)
    r = np.corrcoef(d.x[:, 0], d.z[:, 0])[0, 1]
    assert abs(r) < 3 / math.sqrt(cfg.n)


def test_surrogate_correlation():
    cfg = preset("table2", rho=0.9)
    d = generate_phase1(cfg, 0)
    r = np.corrcoef(d.x[:, 0], d.z[:, 0])[0, 1]
    assert abs(r - 0.9) < 3 * (1 - 0.81) / math.sqrt(cfg.n)


def test_logistic_phase2_fraction_and_balance():
    cfg = preset("table1")
    a = expit(cfg.alpha0[0] + cfg.alpha0[1]), expit(cfg.alpha0[0])
    frac = P_CASE_TABLE1 * a[0] + (1 - P_CASE_TABLE1) * a[1]
    share_cases = P_CASE_TABLE1 * a[0] / frac
    assert 0.045 < frac < 0.05 and 0.4 < share_cases < 0.5
    ms, cases = [], []
    for rep in range(5):
        d = simulate_dataset(cfg, rep)
        ms.append(d.m)
        cases.append(d.y[d.phase2].mean())
    se = math.sqrt(frac * (1 - frac) / (5 * cfg.n))
    assert abs(np.mean(ms) / cfg.n - frac) < 3 * se
    assert abs(np.mean(cases) - share_cases) < 3 * math.sqrt(share_cases * (1 - share_cases) / sum(ms))


def _p_selected_linear_expensive(beta=(0.0, 1.0, 1.0, 4.0), alpha=(0.3, 0.5), cuts=(-0.63, 2.63), rho=0.1):
    s = math.sqrt(beta[3] + beta[2] ** 2 * (1 - rho ** 2))
    total = 0.0
    for lo, hi, xcat in _tertile_pieces():
        def f(t):
            mu = beta[0] + beta[1] * xcat + beta[2] * rho * t
            return (alpha[0] * stats.norm.cdf((cuts[0] - mu) / s) + alpha[1] * stats.norm.sf((cuts[1] - mu) / s)) \
                * stats.norm.pdf(t)
        total += integrate.quad(f, max(lo, -12), min(hi, 12), epsabs=0, epsrel=1e-11)[0]
    return total


def test_stratified_phase2_fraction():
    frac = _p_selected_linear_expensive()
    assert frac == pytest.approx(0.2, abs=0.01)
    cfg = preset("table3")
    ms = [simulate_dataset(cfg, rep).m for rep in range(5)]
    assert abs(np.mean(ms) / cfg.n - frac) < 3 * math.sqrt(frac * (1 - frac) / (5 * cfg.n))


def test_stratified_zero_probability_region():
    d = simulate_dataset(preset("table3"), 0)
    y2 = d.y[d.phase2]
    assert np.all((y2 <= -0.63) | (y2 > 2.63))
    assert np.all(np.isnan(d.z[d.r == 0]))
    assert not np.any(np.isnan(d.z[d.r == 1]))


def test_selection_probability_one_selects_everyone():
    cfg = preset("table3")
    full = generate_phase1(cfg, 0)
    sel = SelectionModel("logistic", alpha=np.array([60.0, 0.0]))
    d = phase2_sample(full, sel, 0, cfg.master_seed)
    assert np.all(d.r == 1)


def test_generation_deterministic_and_rep_dependent():
    cfg = preset("table3", n=300)
    a, b, c = simulate_dataset(cfg, 2), simulate_dataset(cfg, 2), simulate_dataset(cfg, 3)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.r, b.r)
    assert not np.array_equal(a.y, c.y)


def test_config_validation():
    with pytest.raises(ConfigError):
        preset("table1", n=10)
    with pytest.raises(ConfigError):
        preset("table1", replications=0)
    with pytest.raises(ConfigError):
        preset("table1", rho=1.0)
    with pytest.raises(ConfigError):
        preset("table1", beta0=(1.0, 2.0))
    with pytest.raises(ConfigError):
        preset("table3", alpha0=(0.3,))
    with pytest.raises(ConfigError):
        preset("table9")
    with pytest.raises(ConfigError):
        ScenarioConfig("custom", 100, (0.0, 1.0), (0.0, 1.0))


def test_config_round_trip():
    for name, cfg in PRESETS.items():
        d = json.loads(json.dumps(cfg.to_dict()))
        assert ScenarioConfig.from_dict(d) == cfg, name


def test_custom_design():
    cfg = ScenarioConfig("custom", 500, (0.0, 1.0, 1.0, 1.0), (0.2, 0.6), strata=((None, -1.0), (1.0, None)),
                         family="linear_gaussian", x_categorical=False, x_in_outcome=True,
                         selection_form="stratified", ps_kind="cells")
    cfg = ScenarioConfig.from_dict(cfg.to_dict())
    models = scenario_models(cfg)
    assert models.selection.proper_support and models.selection_ps.n_params == 6
    assert simulate_dataset(cfg, 0).m > 0


def test_post_stratification_cells():
    m = scenario_models(preset("table1"))
    assert m.selection_ps.x_cuts == (0.5, 1.5)
    m = scenario_models(preset("table4"))
    assert m.selection_ps.x_cuts == (-0.44, 0.44)
    m = scenario_models(preset("table2"))
    assert m.selection_ps.x_linear == (0,)
    assert scenario_models(preset("table1", post_stratification=False)).selection_ps is None


class TestSummaries:
    def test_metrics(self):
        est = np.array([[1.0], [1.2], [0.8], [1.1]])
        se = np.array([[0.1], [0.1], [0.1], [0.3]])
        s = summarize(["b"], [1.0], est, se, {"ConvergenceError": 1})
        assert s.bias[0] == pytest.approx(0.025)
        assert s.ese[0] == pytest.approx(np.std(est[:, 0], ddof=1))
        assert s.ase[0] == pytest.approx(0.15)
        # |1.2 - 1| and |0.8 - 1| exceed 1.96 * 0.1
        assert s.coverage[0] == pytest.approx(0.5)
        assert s.n_success == 4 and s.n_failed == 1 and not s.unreliable

    def test_single_success_has_no_ese(self):
        s = summarize(["b"], [1.0], [[1.1]], [[0.1]], {})
        assert s.ese is None and s.coverage is None and s.bias is not None

    def test_unreliable_flag(self):
        s = summarize(["b"], [1.0], [[1.1], [0.9], [1.0]], [[0.1]] * 3, {"EstimationError": 1})
        assert s.unreliable  # 1 of 4 failed

    def test_all_failed(self):
        s = summarize(["b"], [1.0], np.zeros((0, 1)), np.zeros((0, 1)), {"EstimationError": 3})
        assert s.bias is None and s.ese is None and s.unreliable


def test_run_replications_deterministic_across_workers():
    cfg = preset("table3", n=400, replications=3)
    a = run_replications(cfg, ["cml_pihat", "sw"])
    b = run_replications(cfg, ["cml_pihat", "sw"], workers=2)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    assert a.summaries["sw"].n_success == 3
    assert len(a.table_rows()) == 2 * 4
    assert "runtime_seconds" in a.to_dict(include_runtime=True)


def test_run_replications_single_replication():
    rep = run_replications(preset("table3", n=400, replications=1), ["cml_pihat"])
    s = rep.summaries["cml_pihat"]
    assert s.ese is None and s.coverage is None and s.n_success == 1


def test_run_replications_rejects_unknown_estimator():
    with pytest.raises(ConfigError):
        run_replications(preset("table3", n=400, replications=1), ["mystery"])
    with pytest.raises(ConfigError):
        run_replications(preset("table3", n=400, replications=1), [])


def test_synthetic_survey_layout():
    d = synthetic_survey(n=500, seed=3)
    assert d.n == 500 and d.m == 500
    assert np.all(d.y > 0)
    e = synthetic_survey(n=500, seed=3)
    assert np.array_equal(d.z, e.z)
