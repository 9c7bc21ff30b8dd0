"""Estimator drivers: nuisance fits, conditional ML, the estimating-equation
estimator and the empirical-likelihood family.

Empirical-likelihood fits use a nested scheme.  For fixed ``eta`` the inner
problem is the convex dual

    min_lambda  -sum_i log(1 - lambda' g_i(eta)),

solved by damped Newton; the empirical probabilities are
``p_i = 1 / (m (1 - lambda' g_i))``.  The outer problem maximizes the profile
``P(eta) = -sum_i log(1 - lambda(eta)' g_i(eta))`` (plus the conditional
log-likelihood for ``el_pi_theta_1``) by Gauss-Newton steps with a backtracking
line search.  By the envelope theorem

    grad P = sum_i G_i' lambda / (1 - lambda' g_i),    G_i = d g_i / d eta',

and the step uses the curvature ``A' B^-1 A`` with ``A = sum_i G_i / (1 - lambda' g_i)``
and ``B = sum_i g_i g_i' / (1 - lambda' g_i)^2``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from .constraints import JOINT_VARIANTS, ConstraintProblem, rank_check
from .data import Dataset
from .exceptions import (
    ConvergenceError,
    DegenerateConditioningError,
    DomainError,
    EstimationError,
    IllConditionedWarning,
    InfeasibleConstraintsError,
    InputError,
    NumericError,
    RankDeficiencyError,
    SingularMatrixError,
    TwoPhaseError,
)
from .inference import closed_form_avar, estimate_moment_blocks, sandwich_variance
from .models import ModelSpec, OutcomeModel, SelectionModel, WorkingModel, working_score
from .numerics import finite_diff_jacobian, psd_inverse, solve_linear

log = logging.getLogger(__name__)


@dataclass
class FitResult:
    """Outcome of one estimator on one dataset.

    ``covariance`` is the estimated covariance of ``beta`` (already divided
    by the sample size).  ``eta_covariance`` covers every estimated
    parameter when available.
    """

    estimator: str
    beta: np.ndarray
    beta_names: tuple
    covariance: np.ndarray | None = None
    alpha: np.ndarray | None = None
    theta: np.ndarray | None = None
    eta: np.ndarray | None = None
    eta_covariance: np.ndarray | None = None
    lambda_: np.ndarray | None = None
    p: np.ndarray | None = None
    profile_loglik: float | None = None
    converged: bool = True
    iterations: int = 0
    grad_norm: float = 0.0
    residual: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        if self.covariance is None:
            return np.full(self.beta.size, np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


# --------------------------------------------------------------------------
# nuisance fits


def _newton_logistic(X, y, max_iter=100, tol=1e-10):
    beta = np.zeros(X.shape[1])
    for it in range(max_iter):
        p = expit(X @ beta)
        score = X.T @ (y - p)
        if np.max(np.abs(score)) < tol:
            return beta, score
        info = (X * (p * (1 - p))[:, None]).T @ X
        try:
            step = solve_linear(info, score)
        except SingularMatrixError as exc:
            raise EstimationError("singular information in logistic fit (separation?)") from exc
        beta = beta + step
        if np.max(np.abs(beta)) > 50:
            raise EstimationError("logistic fit diverges (complete separation)")
    raise EstimationError("logistic fit did not converge")


def fit_working(data: Dataset, working: WorkingModel) -> WorkingModel:
    """Solve the Phase-1 working score equation; returns the model with ``theta`` set.

    The Gaussian working model also gets ``aux_variance`` equal to the
    residual mean square (divisor ``n - dim theta``).
    """
    W = working.design(data.x)
    if data.n < W.shape[1]:
        raise EstimationError("fewer Phase-1 rows than working parameters")
    with warnings.catch_warnings():
        warnings.simplefilter("error", IllConditionedWarning)
        try:
            if working.family == "logistic":
                theta, _ = _newton_logistic(W, data.y)
                return replace(working, theta=theta)
            theta = solve_linear(W.T @ W, W.T @ data.y)
        except (SingularMatrixError, IllConditionedWarning) as exc:
            raise EstimationError("singular working-model design") from exc
    res = data.y - W @ theta
    # one refinement step brings the score equation to rounding level
    theta = theta + np.linalg.lstsq(W, res, rcond=None)[0]
    res = data.y - W @ theta
    dof = max(data.n - W.shape[1], 1)
    return replace(working, theta=theta, aux_variance=float(res @ res / dof))


def fit_selection_mle(data: Dataset, selection: SelectionModel) -> np.ndarray:
    """Maximum likelihood estimate of alpha from the Bernoulli selection likelihood.

    Only rows with ``y`` in the selection support contribute.
    """
    inside = data.s == 1
    if selection.form == "stratified":
        idx = selection.index(data.y, data.x)
        k = selection.n_params
        eligible = np.bincount(idx[inside], minlength=k)
        chosen = np.bincount(idx[inside], weights=data.r[inside], minlength=k)
        if np.any(eligible == 0):
            raise EstimationError(f"empty selection stratum {int(np.flatnonzero(eligible == 0)[0])}")
        alpha = chosen / eligible
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise EstimationError("selection probability estimate on the boundary {0, 1}")
        return alpha
    A = selection.logistic_design(data.y[inside], data.x[inside])
    alpha, _ = _newton_logistic(A, data.r[inside].astype(float))
    return alpha


def fit_outcome_mle(data: Dataset, outcome: OutcomeModel) -> np.ndarray:
    """Ordinary maximum likelihood on the Phase-2 rows, ignoring the selection."""
    p2 = data.phase2
    d = outcome.design(data.x[p2], data.z[p2])
    y = data.y[p2]
    if y.size < outcome.n_params:
        raise EstimationError("fewer Phase-2 rows than outcome parameters")
    if outcome.family == "logistic":
        beta, _ = _newton_logistic(d, y)
        return beta
    b = np.linalg.lstsq(d, y, rcond=None)[0]
    res = y - d @ b
    return np.append(b, res @ res / y.size)


# --------------------------------------------------------------------------
# conditional maximum likelihood


def _resolve_alpha(data, models: ModelSpec, use_alpha):
    if isinstance(use_alpha, str):
        if use_alpha == "known":
            if models.selection.alpha is None:
                raise InputError("known selection probabilities are not set on the selection model")
            return models.selection, np.asarray(models.selection.alpha, dtype=float)
        if use_alpha == "mle":
            return models.selection, fit_selection_mle(data, models.selection)
        if use_alpha == "post_stratified":
            if models.selection_ps is None:
                raise InputError("no post-stratified selection model supplied")
            return models.selection_ps, fit_selection_mle(data, models.selection_ps)
        raise InputError(f"unknown alpha option {use_alpha!r}")
    return models.selection, np.asarray(use_alpha, dtype=float)


def _newton_max(fun, grad_hess, x0, tol, max_iter, name):
    """Damped Newton ascent.  ``grad_hess`` returns (gradient, negative-definite curvature)."""
    x = np.asarray(x0, dtype=float)
    f = fun(x)
    trace = []
    for it in range(1, max_iter + 1):
        g, H = grad_hess(x)
        gnorm = float(np.max(np.abs(g)))
        trace.append((it, f, gnorm))
        if gnorm < tol:
            return x, f, it, gnorm, trace
        try:
            step = solve_linear(-H, g)
        except SingularMatrixError:
            step = g
        if g @ step <= 0:
            step = g
        t = 1.0
        while True:
            trial = x + t * step
            try:
                ft = fun(trial)
            except (TwoPhaseError, FloatingPointError):
                ft = -np.inf
            if np.isfinite(ft) and ft >= f + 1e-4 * t * (g @ step) - 1e-12 * abs(f):
                break
            t *= 0.5
            if t < 1e-12:
                if gnorm < 100 * tol:
                    return x, f, it, gnorm, trace
                raise ConvergenceError(f"{name}: line search failed (gradient {gnorm:.3g})", trace)
        x, f = trial, ft
    raise ConvergenceError(f"{name}: no convergence in {max_iter} iterations", trace)


def fit_cml(data: Dataset, models: ModelSpec, use_alpha="mle", tol: float = 1e-9, max_iter: int = 200) -> FitResult:
    """Maximize the conditional likelihood of the Phase-2 outcomes.

    ``use_alpha`` is ``"known"`` (design values on the selection model),
    ``"mle"``, ``"post_stratified"`` (MLE under ``models.selection_ps``) or an
    explicit alpha vector.
    """
    selection, alpha = _resolve_alpha(data, models, use_alpha)
    m_used = models.with_selection(selection)
    prob = ConstraintProblem("sw", data, m_used, zero_prob=selection.proper_support or None)
    beta0 = fit_outcome_mle(data, models.outcome)
    if models.outcome.family == "linear_gaussian":
        beta0[-1] = max(beta0[-1], 1e-8)

    def fun(b):
        return prob.loglik(b, alpha)[0]

    def score_sum(b):
        return prob.loglik(b, alpha)[1].sum(axis=0)

    def grad_hess(b):
        g = score_sum(b)
        H = finite_diff_jacobian(score_sum, b)
        H = 0.5 * (H + H.T)
        if np.any(np.linalg.eigvalsh(H) >= 0):
            s = prob.loglik(b, alpha)[1]
            H = -(s.T @ s)
        return g, H

    beta, f, it, gnorm, trace = _newton_max(fun, grad_hess, beta0, tol, max_iter, "conditional ML")
    s = prob.loglik(beta, alpha)[1]
    cov = psd_inverse(s.T @ s)
    names = models.outcome.param_names(data.x_names, data.z_names)
    label = {"known": "cml_pi", "mle": "cml_pihat", "post_stratified": "cml_ps"}.get(
        use_alpha if isinstance(use_alpha, str) else "", "cml")
    return FitResult(label, beta, tuple(names), cov, alpha=alpha, eta=beta, profile_loglik=f,
                     iterations=it, grad_norm=gnorm, diagnostics={"trace": trace})


# --------------------------------------------------------------------------
# estimating-equation estimator


def fit_sw(data: Dataset, models: ModelSpec, post_stratified: bool = False, tol: float = 1e-10,
           max_iter: int = 100) -> FitResult:
    """Solve the stacked conditional-score / selection-score system in (beta, alpha)."""
    selection = models.selection_ps if post_stratified else models.selection
    if selection is None:
        raise InputError("no post-stratified selection model supplied")
    m_used = models.with_selection(selection)
    alpha0 = fit_selection_mle(data, selection)
    cml = fit_cml(data, m_used, use_alpha=alpha0)
    prob = ConstraintProblem("sw", data, m_used)
    n = data.n

    def mean_rows(eta):
        return prob.rows(eta).mean(axis=0)

    eta = np.concatenate([cml.beta, alpha0])
    trace = []
    for it in range(1, max_iter + 1):
        r = mean_rows(eta)
        rnorm = float(np.max(np.abs(r)))
        trace.append((it, rnorm))
        if rnorm < tol:
            break
        Jm = finite_diff_jacobian(mean_rows, eta)
        try:
            step = solve_linear(Jm, -r)
        except SingularMatrixError as exc:
            raise ConvergenceError("singular Jacobian in the estimating-equation solve", trace) from exc
        t = 1.0
        while True:
            try:
                rt = mean_rows(eta + t * step)
                ok = np.all(np.isfinite(rt)) and np.sum(rt * rt) <= (1 - 1e-4 * t) * np.sum(r * r)
            except TwoPhaseError:
                ok = False
            if ok:
                break
            t *= 0.5
            if t < 1e-10:
                raise ConvergenceError("line search failed in the estimating-equation solve", trace)
        eta = eta + t * step
    else:
        raise ConvergenceError("estimating-equation solve did not converge", trace)
    g = prob.rows(eta)
    G = finite_diff_jacobian(prob.rows, eta)
    avar = sandwich_variance(g, G)
    cov = avar / n
    sl = prob.layout["beta"]
    names = models.outcome.param_names(data.x_names, data.z_names)
    return FitResult("sw_ps" if post_stratified else "sw", eta[sl], tuple(names), cov[sl, sl],
                     alpha=eta[prob.layout["alpha"]], eta=eta, eta_covariance=cov, iterations=it,
                     grad_norm=rnorm, residual=rnorm, diagnostics={"trace": trace})


# --------------------------------------------------------------------------
# empirical likelihood


@dataclass(frozen=True)
class InnerSolution:
    lam: np.ndarray
    p: np.ndarray
    log_el: float
    profile: float
    residual: float
    iterations: int


def hull_interior(g) -> bool:
    """True when zero lies in the interior of the convex hull of the rows of ``g``."""
    g = np.asarray(g, dtype=float)
    m, k = g.shape
    # maximize t subject to w_i >= t, sum w = 1, sum w_i g_i = 0
    c = np.zeros(m + 1)
    c[-1] = -1.0
    A_eq = np.zeros((k + 1, m + 1))
    A_eq[:k, :m] = g.T
    A_eq[k, :m] = 1.0
    b_eq = np.zeros(k + 1)
    b_eq[k] = 1.0
    A_ub = np.hstack([-np.eye(m), np.ones((m, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * m + [(None, None)], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-12)


def el_inner_lambda(g, lam0=None, tol: float = 1e-13, max_iter: int = 200, guard: float | None = None) -> InnerSolution:
    """Lagrange multiplier of the empirical-likelihood constraint ``sum p_i g_i = 0``.

    Solves ``sum g_i / (1 - lambda' g_i) = 0`` by damped Newton on the convex
    dual, keeping ``1 - lambda' g_i > guard`` (default ``1/m``).  ``tol``
    bounds the max-norm of ``sum p_i g_i``.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    m, k = g.shape
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite constraint rows")
    guard = 1.0 / m if guard is None else guard
    lam = np.zeros(k) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    if lam0 is not None and not np.all(1 - g @ lam > guard):
        lam = np.zeros(k)

    def objective(l):
        return -np.sum(np.log(1 - g @ l))

    f = objective(lam)
    scale = max(1.0, float(np.max(np.abs(g))))
    for it in range(max_iter + 1):
        d = 1 - g @ lam
        w = 1 / d
        grad = g.T @ w
        resid = float(np.max(np.abs(grad))) / m
        if resid <= tol:
            break
        if it == max_iter:
            break
        hess = (g * (w * w)[:, None]).T @ g
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IllConditionedWarning)
                step = -solve_linear(hess + 1e-14 * scale ** 2 * m * np.eye(k), grad)
        except SingularMatrixError:
            step = -grad / (np.trace(hess) + 1e-300)
        decrement = -(grad @ step)
        t = 1.0
        improved = False
        if decrement < 1.0 / 16:
            # quadratic phase of a self-concordant objective: the full step is safe
            trial = lam + step
            dt = 1 - g @ trial
            if np.all(dt > guard):
                ft = -np.sum(np.log(dt))
                improved = True
        while not improved and t > 1e-12:
            trial = lam + t * step
            dt = 1 - g @ trial
            if np.all(dt > guard):
                ft = -np.sum(np.log(dt))
                if ft <= f - 1e-4 * t * decrement:
                    improved = True
                    break
            t *= 0.5
        if not improved:
            if resid <= 1e3 * tol:
                break
            if not hull_interior(g):
                raise InfeasibleConstraintsError("zero is not interior to the convex hull of the constraint rows")
            raise ConvergenceError(f"inner dual solve stalled (residual {resid:.3g})")
        lam, f = trial, ft
    if resid > 1e3 * tol:
        if not hull_interior(g):
            raise InfeasibleConstraintsError("zero is not interior to the convex hull of the constraint rows")
        raise ConvergenceError(f"inner dual solve did not converge (residual {resid:.3g})")
    d = 1 - g @ lam
    p = 1 / (m * d)
    p = p / p.sum()
    profile = -float(np.sum(np.log(d)))
    residual = float(np.max(np.abs(p @ g)))
    return InnerSolution(lam, p, float(np.sum(np.log(p))), profile, residual, it)


@dataclass(frozen=True)
class ELOptions:
    """Options for :func:`fit_el`.

    ``theta`` is ``"hat"`` (Phase-1 estimate) or a fixed vector; ``alpha``
    is ``"known"``, ``"mle"`` or a vector and applies to the variants that
    hold alpha fixed.  ``zero_prob=True`` forces the zero-probability
    formulas on a whole-line design.
    """

    theta: object = "hat"
    alpha: object = "known"
    post_stratified: bool = False
    zero_prob: bool | None = None
    tol: float = 1e-6
    max_iter: int = 500
    inner_tol: float = 1e-13
    inner_max_iter: int = 200
    variance: bool = True
    multimodal_check: bool = False
    jitter: float = 0.05
    seed: int = 0


@dataclass
class _State:
    eta: np.ndarray
    g: np.ndarray
    inner: InnerSolution
    value: float
    loglik: float = 0.0
    score: np.ndarray | None = None


class ProfileSolver:
    """Nested maximizer of the empirical-likelihood profile for one problem."""

    def __init__(self, problem: ConstraintProblem, with_loglik: bool = False, inner_tol=1e-13, inner_max_iter=200):
        self.problem = problem
        self.with_loglik = with_loglik
        self.inner_tol = inner_tol
        self.inner_max_iter = inner_max_iter

    def evaluate(self, eta, lam0=None) -> _State:
        g = self.problem.rows(eta)
        inner = el_inner_lambda(g, lam0, self.inner_tol, self.inner_max_iter)
        value = inner.profile
        ll, score = 0.0, None
        if self.with_loglik:
            ll, score = self.problem.loglik(eta)
            value += ll
        return _State(np.asarray(eta, dtype=float), g, inner, value, ll, score)

    def value(self, eta) -> float:
        return self.evaluate(eta).value

    def derivatives(self, st: _State):
        G = finite_diff_jacobian(self.problem.rows, st.eta)
        w = 1 / (1 - st.g @ st.inner.lam)
        A = np.einsum("i,ikq->kq", w, G)
        grad = A.T @ st.inner.lam
        B = (st.g * (w * w)[:, None]).T @ st.g
        if not np.any(A):
            # constraints that do not depend on eta carry no curvature
            curv = np.zeros((A.shape[1], A.shape[1]))
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IllConditionedWarning)
                curv = A.T @ solve_linear(B, A)
        if self.with_loglik:
            grad = grad + st.score.sum(axis=0)
            curv = curv + st.score.T @ st.score
        return grad, 0.5 * (curv + curv.T), G

    def solve(self, eta0, tol=1e-6, max_iter=500):
        st = self.evaluate(eta0)
        trace = []
        status = "converged"
        for it in range(1, max_iter + 1):
            grad, curv, G = self.derivatives(st)
            gnorm = float(np.max(np.abs(grad)))
            trace.append((it, st.value, gnorm))
            if gnorm <= tol:
                return st, it, gnorm, G, status, trace
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", IllConditionedWarning)
                    step = solve_linear(curv, grad)
            except SingularMatrixError:
                step = grad / (np.trace(curv) + 1.0)
            slope = grad @ step
            if slope <= 0:
                step, slope = grad, grad @ grad
            t = 1.0
            accepted = None
            while t >= 1e-10:
                try:
                    trial = self.evaluate(st.eta + t * step, st.inner.lam)
                    if trial.value >= st.value + 1e-4 * t * slope - 1e-13 * max(1.0, abs(st.value)):
                        accepted = trial
                        break
                except (TwoPhaseError, FloatingPointError):
                    pass
                t *= 0.5
            if accepted is None:
                if gnorm <= 1e3 * tol:
                    status = "stalled"
                    return st, it, gnorm, G, status, trace
                raise ConvergenceError(f"profile line search failed (gradient {gnorm:.3g})", trace)
            st = accepted
        raise ConvergenceError(f"profile maximization did not converge in {max_iter} iterations", trace)


def el_profile_loglik(variant, eta, dataset: Dataset, models: ModelSpec, *, alpha=None, theta=None,
                      zero_prob=None) -> float:
    """Profile objective at ``eta`` with the multiplier solved out.

    ``-sum log(1 - lambda' g_i)``, plus the conditional log-likelihood for
    ``el_pi_theta_1``.
    """
    problem = ConstraintProblem(variant, dataset, models, alpha=alpha, theta=theta, zero_prob=zero_prob)
    return ProfileSolver(problem, with_loglik=variant == "el_pi_theta_1").value(eta)


def init_strategy(variant, dataset: Dataset, models: ModelSpec, alpha=None, theta=None):
    """Starting value: conditional ML beta, selection MLE alpha, Phase-1 theta."""
    alpha_hat = fit_selection_mle(dataset, models.selection) if alpha is None else np.asarray(alpha, dtype=float)
    beta = fit_cml(dataset, models, use_alpha=alpha_hat).beta
    if variant in JOINT_VARIANTS:
        th = fit_working(dataset, models.working).theta if theta is None else np.asarray(theta, dtype=float)
        return np.concatenate([beta, alpha_hat, th])
    return beta


def _el_label(variant, options: ELOptions):
    if variant.startswith("el_pi_theta"):
        th = "theta_hat" if isinstance(options.theta, str) else "theta_star"
        al = "pi" if (isinstance(options.alpha, str) and options.alpha == "known") else "pihat"
        return f"el_{al}_{th}_{variant[-1]}"
    return variant + ("_ps" if options.post_stratified else "")


def fit_el(variant: str, data: Dataset, models: ModelSpec, options: ELOptions | None = None, **kwargs) -> FitResult:
    """Fit one empirical-likelihood variant (see :mod:`twophase.constraints`)."""
    options = options or ELOptions()
    if kwargs:
        options = replace(options, **kwargs)
    if variant not in ("el_pi_theta_1", "el_pi_theta_2") + JOINT_VARIANTS:
        raise InputError(f"unknown EL variant {variant!r}")
    selection = models.selection_ps if options.post_stratified else models.selection
    if selection is None:
        raise InputError("no post-stratified selection model supplied")
    working = fit_working(data, models.working)
    m_used = ModelSpec(models.outcome, working, selection, None, models.quadrature)

    if isinstance(options.theta, str):
        if options.theta != "hat":
            raise InputError("theta must be 'hat' or a vector")
        theta = working.theta
    else:
        theta = np.asarray(options.theta, dtype=float)
        m_used = m_used.with_working(replace(working, theta=theta))

    if variant in JOINT_VARIANTS:
        alpha_fixed = None
        eta0 = init_strategy(variant, data, m_used, theta=theta)
    else:
        if isinstance(options.alpha, str):
            _, alpha_fixed = _resolve_alpha(data, m_used, options.alpha)
        else:
            alpha_fixed = np.asarray(options.alpha, dtype=float)
        eta0 = fit_cml(data, m_used, use_alpha=alpha_fixed).beta

    problem = ConstraintProblem(variant, data, m_used, alpha=alpha_fixed, theta=theta, zero_prob=options.zero_prob)
    diagnostics = {"zero_prob": bool(problem.zero_prob), "blocks": [b for b, _ in problem.blocks]}
    if variant == "el4":
        report = rank_check(problem.constraint_set(eta0))
        diagnostics["rank"] = report
        if report.deficient:
            raise RankDeficiencyError(
                f"stacked constraints have rank {report.rank} < {report.dim} "
                f"(dependent: {', '.join(report.dependent)}); use el5")
    solver = ProfileSolver(problem, with_loglik=variant == "el_pi_theta_1",
                           inner_tol=options.inner_tol, inner_max_iter=options.inner_max_iter)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", IllConditionedWarning)
        st, it, gnorm, G, status, trace = solver.solve(eta0, options.tol, options.max_iter)
    diagnostics["condition_warnings"] = len(caught)
    diagnostics["status"] = status
    diagnostics["trace"] = trace
    if options.multimodal_check:
        diagnostics["multimodal"] = _multimodal(solver, st, options)

    eta = st.eta
    sl = problem.layout["beta"]
    cov = eta_cov = None
    if options.variance:
        cov, eta_cov, how = _el_covariance(variant, problem, st, G, data, m_used, theta, alpha_fixed, options)
        diagnostics["variance"] = how
    names = models.outcome.param_names(data.x_names, data.z_names)
    return FitResult(
        _el_label(variant, options), eta[sl], tuple(names), cov,
        alpha=eta[problem.layout["alpha"]] if "alpha" in problem.layout else alpha_fixed,
        theta=eta[problem.layout["theta"]] if "theta" in problem.layout else theta,
        eta=eta, eta_covariance=eta_cov, lambda_=st.inner.lam, p=st.inner.p, profile_loglik=st.value,
        converged=True, iterations=it, grad_norm=gnorm, residual=st.inner.residual, diagnostics=diagnostics,
    )


def _el_covariance(variant, problem, st, G, data, models, theta, alpha_fixed, options):
    n = data.n
    sl = problem.layout["beta"]
    if variant in JOINT_VARIANTS:
        avar = sandwich_variance(st.g, G)
        eta_cov = avar / n
        return eta_cov[sl, sl], eta_cov, "sandwich"
    blocks = estimate_moment_blocks(data, models, st.eta, alpha_fixed, theta, zero_prob=problem.zero_prob)
    fixed_theta = not isinstance(options.theta, str)
    if problem.zero_prob:
        kind = "pi_theta0_tilde" if fixed_theta else "pi_theta_hat_tilde"
    else:
        kind = "pi_theta_star" if fixed_theta else "pi_theta_hat"
    cov = closed_form_avar(kind, blocks) / n
    return cov, cov, f"closed_form:{kind}"


def _multimodal(solver: ProfileSolver, st: _State, options: ELOptions) -> bool:
    """Refit from jittered starts; flag when optimal profile values disagree by more than 1e-4."""
    rng = np.random.default_rng(options.seed)
    values = []
    for _ in range(3):
        start = st.eta + options.jitter * np.maximum(1.0, np.abs(st.eta)) * rng.standard_normal(st.eta.size)
        try:
            values.append(solver.solve(start, options.tol, options.max_iter)[0].value)
        except TwoPhaseError:
            continue
    return bool(values) and max(abs(v - st.value) for v in values) > 1e-4


# --------------------------------------------------------------------------
# registry


def _el(variant, **kw):
    return lambda data, models, **opts: fit_el(variant, data, models, **{**kw, **opts})


def _plain(fn):
    return lambda data, models, **opts: fn(data, models)


ESTIMATORS = {
    "cml_pi": _plain(lambda data, models: fit_cml(data, models, "known")),
    "cml_pihat": _plain(lambda data, models: fit_cml(data, models, "mle")),
    "cml_ps": _plain(lambda data, models: fit_cml(data, models, "post_stratified")),
    "sw": _plain(fit_sw),
    "sw_ps": _plain(lambda data, models: fit_sw(data, models, post_stratified=True)),
    "el_pi_theta_hat_1": _el("el_pi_theta_1", alpha="known"),
    "el_pi_theta_hat_2": _el("el_pi_theta_2", alpha="known"),
    "el_pihat_theta_hat_1": _el("el_pi_theta_1", alpha="mle"),
    "el_pihat_theta_hat_2": _el("el_pi_theta_2", alpha="mle"),
    "el3": _el("el3"),
    "el4": _el("el4"),
    "el5": _el("el5"),
    "el3_ps": _el("el3", post_stratified=True),
    "el4_ps": _el("el4", post_stratified=True),
    "el5_ps": _el("el5", post_stratified=True),
}


def run_estimator(name: str, data: Dataset, models: ModelSpec, **el_options) -> FitResult:
    """Run a registered estimator; ``el_options`` are passed to EL fits and ignored otherwise."""
    try:
        fn = ESTIMATORS[name]
    except KeyError:
        raise InputError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}") from None
    res = fn(data, models, **el_options)
    res.estimator = name
    return res
