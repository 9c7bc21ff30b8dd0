import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from twophase.exceptions import DegenerateConditioningError, DomainError, InputError
from twophase.models import (
    ConditionalLaw,
    OutcomeModel,
    SelectionModel,
    WorkingModel,
    cond_score_alpha,
    cond_score_beta,
    conditional_density_fc,
    outcome_logpdf,
    outcome_score,
    selection_prob,
    selection_score,
    working_score,
)
from twophase.numerics import Interval, finite_diff_jacobian

STRATA = (Interval(-math.inf, -0.63), Interval(2.63, math.inf))


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def _random_point(rng, kind):
    x = np.array([[rng.choice([0.0, 1.0, 2.0])]])
    z = np.array([[rng.normal()]])
    if kind == "logistic":
        out = OutcomeModel("logistic")
        sel = SelectionModel("logistic", x_col=0, x_cuts=(0.5, 1.5))
        beta = rng.normal([-2, 0.5, 0.5], 0.5)
        alpha = rng.normal([-1.5, 1.5, 0.3, -0.3], 0.3)
        y = np.array([float(rng.random() < 0.5)])
    elif kind == "gauss_logistic":
        out = OutcomeModel("linear_gaussian")
        sel = SelectionModel("logistic", x_linear=(0,))
        beta = np.append(rng.normal([0, 1, 1], 0.3), rng.uniform(0.5, 3))
        alpha = rng.normal([-1, 0.6, 0.2], 0.2)
        y = np.array([rng.normal(1, 2)])
    else:
        out = OutcomeModel("linear_gaussian")
        sel = SelectionModel("stratified", strata=STRATA, x_col=0, x_cuts=(0.5, 1.5))
        beta = np.append(rng.normal([0, 1, 1], 0.3), rng.uniform(1, 5))
        alpha = rng.uniform(0.1, 0.9, 6)
        y = np.array([rng.choice([rng.uniform(-4.0, -0.7), rng.uniform(2.7, 6.0)])])
    return out, sel, y, x, z, beta, alpha


@pytest.mark.parametrize("kind", ["logistic", "gauss_logistic", "stratified"])
def test_conditional_scores_match_finite_differences(rng, kind):
    for _ in range(34):
        out, sel, y, x, z, beta, alpha = _random_point(rng, kind)
        logfc = lambda b, a: ConditionalLaw.build(out, sel, x, z, b, a).logpdf(y)[0]
        sb = cond_score_beta(out, sel, y, x, z, beta, alpha)[0]
        fd_b = finite_diff_jacobian(lambda b: np.array([logfc(b, alpha)]), beta)[0]
        assert _rel_err(sb, fd_b) < 1e-5
        if sel.form == "logistic":
            sa = cond_score_alpha(out, sel, y, x, z, beta, alpha)[0]
            fd_a = finite_diff_jacobian(lambda a: np.array([logfc(beta, a)]), alpha)[0]
            assert _rel_err(sa, fd_a) < 1e-5


def test_stratified_alpha_score_matches_finite_differences(rng):
    # the stratified log f_cc is smooth in alpha for fixed strata
    for _ in range(30):
        out, sel, y, x, z, beta, alpha = _random_point(rng, "stratified")
        logfc = lambda a: ConditionalLaw.build(out, sel, x, z, beta, a).logpdf(y)
        sa = cond_score_alpha(out, sel, y, x, z, beta, alpha)[0]
        fd = finite_diff_jacobian(logfc, alpha, step=1e-6)[0]
        assert _rel_err(sa, fd) < 1e-5


def test_working_score_matches_finite_differences(rng):
    for fam in ("logistic", "linear_gaussian"):
        wm = WorkingModel(fam)
        for _ in range(50):
            x = np.array([[rng.normal()]])
            theta = rng.normal(size=2)
            y = np.array([float(rng.random() < 0.5)]) if fam == "logistic" else np.array([rng.normal()])
            # h is the score of the working log-likelihood (unit variance for the Gaussian family)
            if fam == "logistic":
                ll = lambda t: np.array([stats.bernoulli.logpmf(y[0], expit(t[0] + t[1] * x[0, 0]))])
            else:
                ll = lambda t: np.array([stats.norm.logpdf(y[0], t[0] + t[1] * x[0, 0])])
            fd = finite_diff_jacobian(ll, theta)[0]
            assert _rel_err(working_score(wm, y, x, theta)[0], fd) < 1e-5


def test_outcome_logpdf_and_score(rng):
    out = OutcomeModel("linear_gaussian")
    x, z = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
    beta = np.array([0.1, 0.5, -0.3, 2.0])
    y = rng.normal(size=5)
    mu = beta[0] + beta[1] * x[:, 0] + beta[2] * z[:, 0]
    assert np.allclose(outcome_logpdf(out, y, x, z, beta), stats.norm.logpdf(y, mu, math.sqrt(2.0)))
    fd = finite_diff_jacobian(lambda b: outcome_logpdf(out, y, x, z, b), beta)
    assert np.allclose(outcome_score(out, y, x, z, beta), fd, rtol=1e-6, atol=1e-8)
    lo = OutcomeModel("logistic")
    yb = (rng.random(5) < 0.5).astype(float)
    p = expit(beta[0] + beta[1] * x[:, 0] + beta[2] * z[:, 0])
    assert np.allclose(outcome_logpdf(lo, yb, x, z, beta[:3]), stats.bernoulli.logpmf(yb, p))


def test_fc_normalizes_over_support(rng):
    out = OutcomeModel("linear_gaussian")
    sel = SelectionModel("stratified", strata=STRATA, alpha=np.array([0.3, 0.5]))
    x, z = np.array([[1.0]]), np.array([[0.4]])
    beta = np.array([0.0, 1.0, 1.0, 4.0])
    f = lambda y: conditional_density_fc(out, sel, y, x, z, beta, sel.alpha)[0]
    total = integrate.quad(f, -40, -0.63)[0] + integrate.quad(f, 2.63, 40)[0]
    assert total == pytest.approx(1.0, abs=1e-9)


def test_fc_normalizes_logistic_gaussian():
    out = OutcomeModel("linear_gaussian")
    sel = SelectionModel("logistic")
    x, z = np.array([[1.0]]), np.array([[-0.4]])
    beta = np.array([0.2, 1.0, 0.5, 2.0])
    f = lambda y: conditional_density_fc(out, sel, y, x, z, beta, np.array([-1.0, 0.8]))[0]
    assert integrate.quad(f, -40, 40, limit=200)[0] == pytest.approx(1.0, abs=1e-9)


def test_constant_selection_gives_fc_equal_f():
    out = OutcomeModel("linear_gaussian")
    sel = SelectionModel("logistic")
    alpha = np.array([-1.2, 0.0])
    x, z = np.array([[2.0]]), np.array([[0.3]])
    beta = np.array([0.5, -1.0, 2.0, 1.5])
    grid = np.linspace(-6, 6, 101)
    fc = np.array([conditional_density_fc(out, sel, g, x, z, beta, alpha)[0] for g in grid])
    f = np.exp(outcome_logpdf(out, grid, np.repeat(x, grid.size, 0), np.repeat(z, grid.size, 0), beta))
    assert np.max(np.abs(fc - f)) < 1e-10


def test_degenerate_binary_support():
    out = OutcomeModel("logistic")
    sel = SelectionModel("logistic", strata=(Interval(0.5, math.inf),))
    with pytest.raises(DegenerateConditioningError):
        ConditionalLaw.build(out, sel, np.array([[1.0]]), np.array([[0.0]]), np.zeros(3), np.array([0.0, 1.0]))


def test_selection_prob_zero_outside_support():
    sel = SelectionModel("stratified", strata=STRATA, alpha=np.array([0.3, 0.5]))
    pi = selection_prob(sel, np.array([-1.0, 0.0, 3.0]), np.zeros((3, 1)), sel.alpha)
    assert list(pi) == [0.3, 0.0, 0.5]


def test_selection_cells_and_names():
    sel = SelectionModel("stratified", strata=STRATA, x_col=0, x_cuts=(0.5, 1.5))
    assert sel.n_params == 6 and len(sel.param_names()) == 6
    assert list(sel.cell(np.array([[0.0], [0.5], [1.0], [2.0]]))) == [0, 0, 1, 2]
    lg = SelectionModel("logistic", x_col=0, x_cuts=(0.5, 1.5), x_linear=(0,))
    assert lg.n_params == 5


def test_selection_score_domain_error():
    sel = SelectionModel("logistic")
    with pytest.raises(DomainError):
        selection_score(sel, np.array([1.0]), np.zeros((1, 1)), np.array([1]), np.array([800.0, 0.0]))


def test_stratified_alpha_must_be_probabilities():
    sel = SelectionModel("stratified", strata=STRATA)
    with pytest.raises(DomainError):
        selection_prob(sel, np.array([-1.0]), np.zeros((1, 1)), np.array([0.0, 0.5]))


def test_model_validation():
    with pytest.raises(InputError):
        OutcomeModel("poisson")
    with pytest.raises(InputError):
        SelectionModel("stratified")
    with pytest.raises(DomainError):
        OutcomeModel("linear_gaussian").split(np.array([0.0, 1.0, 1.0, -1.0]))
