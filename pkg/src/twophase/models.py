"""Outcome, working and selection models.

All functions are vectorized over subjects.  ``x`` and ``z`` are 2-D arrays
with one row per subject; ``y`` is either ``(n,)`` (observed outcomes) or
``(n, K)`` (quadrature nodes, one row of nodes per subject).

The selection-conditioned outcome law of a Phase-2 subject is

    f_c(y | x, z) = f(y | x, z; beta) pi(y, x; alpha) I(y in D)
                    / integral of f pi I(y in D) dy,

evaluated through a per-subject quadrature rule (see :class:`ConditionalLaw`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .exceptions import DegenerateConditioningError, DomainError, InputError, NumericError
from .numerics import (
    LOG_SQRT_2PI,
    MASS_FLOOR,
    WHOLE_LINE,
    Interval,
    QuadratureSpec,
    binary_rule,
    check_disjoint,
    gauss_rule,
    in_support,
    is_whole_line,
    truncnorm_rule,
)

FAMILIES = ("logistic", "linear_gaussian")


def _rows(a, n=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1) if n is None or n == 1 else a.reshape(-1, 1)
    return a


# --------------------------------------------------------------------------
# outcome model


@dataclass(frozen=True)
class OutcomeModel:
    """``f(Y | X, Z; beta)`` with linear predictor ``beta' (1, X_sub, Z_sub)``.

    For ``linear_gaussian`` the last coordinate of ``beta`` is the variance.
    ``x_cols`` and ``z_cols`` pick the columns entering the linear predictor.
    ``beta`` optionally stores a reference (true) value.
    """

    family: str
    x_cols: tuple = (0,)
    z_cols: tuple = (0,)
    beta: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown outcome family {self.family!r}")

    @property
    def n_mean(self) -> int:
        return 1 + len(self.x_cols) + len(self.z_cols)

    @property
    def n_params(self) -> int:
        return self.n_mean + (self.family == "linear_gaussian")

    def design(self, x, z):
        x = _rows(x)
        z = _rows(z)
        n = max(x.shape[0], z.shape[0])
        parts = [np.ones((n, 1))]
        if self.x_cols:
            parts.append(np.broadcast_to(x[:, list(self.x_cols)], (n, len(self.x_cols))))
        if self.z_cols:
            parts.append(np.broadcast_to(z[:, list(self.z_cols)], (n, len(self.z_cols))))
        return np.concatenate(parts, axis=1)

    def param_names(self, x_names=None, z_names=None) -> list:
        xn = [x_names[j] if x_names else f"x{j}" for j in self.x_cols]
        zn = [z_names[j] if z_names else f"z{j}" for j in self.z_cols]
        names = ["(Intercept)"] + xn + zn
        return names + ["sigma2"] if self.family == "linear_gaussian" else names

    def split(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.size != self.n_params:
            raise InputError(f"beta has {beta.size} entries, model needs {self.n_params}")
        if self.family == "linear_gaussian":
            if not beta[-1] > 0:
                raise DomainError("outcome variance must be positive")
            return beta[:-1], float(beta[-1])
        return beta, None


def _check_binary(y):
    if not np.all((y == 0) | (y == 1)):
        raise InputError("logistic outcome requires y in {0, 1}")


def _logpdf_from_lp(model: OutcomeModel, y, lp, var):
    if model.family == "logistic":
        return np.where(y == 1, log_expit(lp), log_expit(-lp))
    res = y - lp
    return -0.5 * res * res / var - 0.5 * np.log(var) - LOG_SQRT_2PI


def _score_from_lp(model: OutcomeModel, y, lp, var, d):
    """Score in beta at ``y`` (shape ``lp.shape``) with design ``d`` (n, p)."""
    extra = (None,) * (np.ndim(y) - 1)
    dd = d[(slice(None),) + extra + (slice(None),)]
    if model.family == "logistic":
        return (y - expit(lp))[..., None] * dd
    res = y - lp
    mean_part = (res / var)[..., None] * dd
    var_part = (-0.5 / var + 0.5 * res * res / (var * var))[..., None]
    return np.concatenate([mean_part, var_part], axis=-1)


def outcome_logpdf(model: OutcomeModel, y, x, z, beta):
    """log f(y | x, z; beta), one value per subject."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    b, var = model.split(beta)
    if model.family == "logistic":
        _check_binary(y)
    lp = model.design(x, z) @ b
    return _logpdf_from_lp(model, y, lp, var)


def outcome_score(model: OutcomeModel, y, x, z, beta):
    """Gradient of :func:`outcome_logpdf` in beta, shape ``(n, p)``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    b, var = model.split(beta)
    if model.family == "logistic":
        _check_binary(y)
    d = model.design(x, z)
    return _score_from_lp(model, y, d @ b, var, d)


# --------------------------------------------------------------------------
# working model


@dataclass(frozen=True)
class WorkingModel:
    """Working model ``f(Y | X; theta)`` with score ``h = (Y - E[Y|X]) (1, X_sub)``.

    ``aux_variance`` is the residual variance of the Gaussian working law,
    needed only for truncated expectations of ``h``.
    """

    family: str
    x_cols: tuple = (0,)
    theta: np.ndarray | None = None
    aux_variance: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown working family {self.family!r}")
        if self.aux_variance is not None and not self.aux_variance > 0:
            raise DomainError("aux_variance must be positive")

    @property
    def n_params(self) -> int:
        return 1 + len(self.x_cols)

    def design(self, x):
        x = _rows(x)
        return np.concatenate([np.ones((x.shape[0], 1)), x[:, list(self.x_cols)]], axis=1)

    def param_names(self, x_names=None) -> list:
        return ["theta_(Intercept)"] + [f"theta_{x_names[j] if x_names else f'x{j}'}" for j in self.x_cols]

    def mean(self, x, theta):
        lp = self.design(x) @ np.asarray(theta, dtype=float)
        return expit(lp) if self.family == "logistic" else lp


def working_score(working: WorkingModel, y, x, theta):
    """h(y, x; theta); ``y`` may be ``(n,)`` or ``(n, K)``."""
    y = np.asarray(y, dtype=float)
    w = working.design(x)
    mu = working.mean(x, theta)
    if y.ndim == 2:
        return (y - mu[:, None])[..., None] * w[:, None, :]
    return (np.atleast_1d(y) - mu)[:, None] * w


def working_rule(working: WorkingModel, x, theta, support: Sequence[Interval] = WHOLE_LINE):
    """Quadrature rule for the working law of Y given x restricted to ``support``.

    ``h`` is linear in y, so the two-node truncated rule is exact.
    """
    mu = working.mean(x, theta)
    if working.family == "logistic":
        nodes, weights = binary_rule(mu, support)
    else:
        if working.aux_variance is None:
            raise InputError("a Gaussian working law needs aux_variance")
        nodes, weights = truncnorm_rule(mu, np.full_like(mu, np.sqrt(working.aux_variance)), support)
    return nodes, weights


# --------------------------------------------------------------------------
# selection model


@dataclass(frozen=True)
class SelectionModel:
    """Phase-2 selection probability ``pi(y, x; alpha)``.

    ``logistic``:  logit pi = alpha' (1, y, x[x_linear], cell dummies), with
    support ``D`` given by ``strata`` (empty means the whole line).

    ``stratified``:  pi = alpha[j * n_cells + k] for y in ``strata[j]`` and x
    in cell ``k``, zero outside the strata.  The strata define ``D``.

    Cells come from ``x_col`` cut at ``x_cuts`` into ``(-inf, c1], (c1, c2], ...``;
    they implement post-stratification.  ``alpha`` optionally stores the
    design (known) values.
    """

    form: str
    strata: tuple = ()
    x_col: int | None = None
    x_cuts: tuple = ()
    x_linear: tuple = ()
    alpha: np.ndarray | None = None

    def __post_init__(self):
        if self.form not in ("logistic", "stratified"):
            raise InputError(f"unknown selection form {self.form!r}")
        if self.form == "stratified" and not self.strata:
            raise InputError("stratified selection needs strata")
        if self.form == "stratified" and self.x_linear:
            raise InputError("x_linear applies to the logistic form only")
        check_disjoint(self.strata)
        if list(self.x_cuts) != sorted(self.x_cuts):
            raise InputError("x_cuts must be increasing")
        if self.x_cuts and self.x_col is None:
            raise InputError("x_cuts needs x_col")

    @property
    def support(self) -> tuple:
        return tuple(self.strata) if self.strata else WHOLE_LINE

    @property
    def proper_support(self) -> bool:
        return not is_whole_line(self.support)

    @property
    def n_cells(self) -> int:
        return len(self.x_cuts) + 1 if self.x_col is not None else 1

    @property
    def n_params(self) -> int:
        if self.form == "stratified":
            return len(self.strata) * self.n_cells
        return 2 + len(self.x_linear) + self.n_cells - 1

    def param_names(self, x_names=None) -> list:
        xname = (lambda j: x_names[j] if x_names else f"x{j}")
        if self.form == "stratified":
            return [f"alpha_S{j + 1}" + (f"_cell{k + 1}" if self.n_cells > 1 else "")
                    for j in range(len(self.strata)) for k in range(self.n_cells)]
        names = ["alpha_(Intercept)", "alpha_y"] + [f"alpha_{xname(j)}" for j in self.x_linear]
        return names + [f"alpha_cell{k + 1}" for k in range(1, self.n_cells)]

    def cell(self, x):
        x = _rows(x)
        if self.x_col is None:
            return np.zeros(x.shape[0], dtype=int)
        return np.searchsorted(np.asarray(self.x_cuts, dtype=float), x[:, self.x_col], side="left")

    def stratum(self, y):
        """Index of the stratum containing y, or -1."""
        y = np.asarray(y, dtype=float)
        out = np.full(y.shape, -1, dtype=int)
        for j, iv in enumerate(self.strata):
            out[iv.contains(y)] = j
        return out

    def logistic_design(self, y, x):
        """Columns (1, y, x-linear, cell dummies) broadcast to ``y.shape + (k,)``."""
        y = np.asarray(y, dtype=float)
        x = _rows(x)
        extra = (None,) * (y.ndim - 1)
        cols = [np.ones_like(y), y]
        for j in self.x_linear:
            cols.append(np.broadcast_to(x[(slice(None), j) + extra], y.shape))
        if self.n_cells > 1:
            c = self.cell(x)[(slice(None),) + extra]
            for k in range(1, self.n_cells):
                cols.append(np.broadcast_to((c == k).astype(float), y.shape))
        return np.stack(cols, axis=-1)

    def index(self, y, x):
        """Flat alpha index for stratified selection (-1 outside D)."""
        j = self.stratum(y)
        c = self.cell(x)
        c = c.reshape(c.shape + (1,) * (np.ndim(y) - 1))
        return np.where(j >= 0, j * self.n_cells + c, -1)


def _check_alpha(selection: SelectionModel, alpha):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != selection.n_params:
        raise InputError(f"alpha has {alpha.size} entries, selection model needs {selection.n_params}")
    if selection.form == "stratified" and not np.all((alpha > 0) & (alpha < 1)):
        raise DomainError("stratified selection probabilities must lie in (0, 1)")
    return alpha


def selection_prob(selection: SelectionModel, y, x, alpha):
    """pi(y, x; alpha); exactly 0 for y outside D."""
    alpha = _check_alpha(selection, alpha)
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    inside = in_support(y, selection.support)
    if selection.form == "stratified":
        idx = selection.index(y, x)
        return np.where(inside, alpha[np.maximum(idx, 0)], 0.0)
    pi = expit(selection.logistic_design(y, x) @ alpha)
    return np.where(inside, pi, 0.0)


def dlogpi_dalpha(selection: SelectionModel, y, x, alpha):
    """Gradient of log pi in alpha for y in D (zero outside D)."""
    alpha = _check_alpha(selection, alpha)
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    inside = in_support(y, selection.support)
    if selection.form == "stratified":
        idx = selection.index(y, x)
        out = np.zeros(y.shape + (alpha.size,))
        onehot = np.eye(alpha.size)[np.maximum(idx, 0)]
        out = onehot / alpha[np.maximum(idx, 0)][..., None]
        return np.where(inside[..., None], out, 0.0)
    a = selection.logistic_design(y, x)
    pi = expit(a @ alpha)
    return np.where(inside[..., None], (1.0 - pi)[..., None] * a, 0.0)


def selection_score(selection: SelectionModel, y, x, r, alpha):
    """Score of the Bernoulli selection likelihood, rows with y outside D are zero."""
    alpha = _check_alpha(selection, alpha)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    inside = in_support(y, selection.support)
    pi = selection_prob(selection, y, x, alpha)
    if np.any(inside & ((pi <= 0) | (pi >= 1))):
        raise DomainError("selection probability is 0 or 1 at a contributing row")
    if selection.form == "stratified":
        idx = selection.index(y, x)
        out = np.zeros((y.size, alpha.size))
        rows = np.flatnonzero(inside)
        out[rows, idx[rows]] = (r[rows] - pi[rows]) / (pi[rows] * (1 - pi[rows]))
        return out
    a = selection.logistic_design(y, x)
    return np.where(inside[:, None], (r - pi)[:, None] * a, 0.0)


# --------------------------------------------------------------------------
# selection-conditioned outcome law


def outcome_rule(outcome: OutcomeModel, selection: SelectionModel, x, z, beta, quad: QuadratureSpec | None = None):
    """Per-subject nodes and f-weights covering D (see module docstring).

    Returns ``(nodes, weights, lp, var, design)``.
    """
    b, var = outcome.split(beta)
    d = outcome.design(x, z)
    lp = d @ b
    support = selection.support
    if outcome.family == "logistic":
        nodes, weights = binary_rule(expit(lp), support)
        if nodes.shape[-1] < 2:
            raise DegenerateConditioningError(
                "the support admits a single outcome value; the selection-conditioned law is degenerate"
            )
        return nodes, weights, lp, var, d
    sd = np.full_like(lp, np.sqrt(var))
    method = quad.method if quad is not None else None
    if method == "gauss_hermite" or (method is None and selection.form == "logistic"):
        nodes, weights = gauss_rule(lp, sd, support, quad.nodes if quad is not None else 64)
    else:
        nodes, weights = truncnorm_rule(lp, sd, support)
    return nodes, weights, lp, var, d


@dataclass
class ConditionalLaw:
    """Quadrature representation of ``f_c`` for a set of subjects at (beta, alpha)."""

    outcome: OutcomeModel
    selection: SelectionModel
    x: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    nodes: np.ndarray
    fweights: np.ndarray
    pi_nodes: np.ndarray
    denom: np.ndarray
    lp: np.ndarray
    var: float | None
    design: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, outcome, selection, x, z, beta, alpha, quad=None):
        x = _rows(x)
        z = _rows(z)
        beta = np.asarray(beta, dtype=float)
        alpha = _check_alpha(selection, alpha)
        nodes, w, lp, var, d = outcome_rule(outcome, selection, x, z, beta, quad)
        pi = selection_prob(selection, nodes, x, alpha)
        denom = np.sum(w * pi, axis=-1)
        if np.any(~(denom > MASS_FLOOR)):
            bad = int(np.flatnonzero(~(denom > MASS_FLOOR))[0])
            raise DegenerateConditioningError(f"normalizing integral vanishes for subject {bad}")
        return cls(outcome, selection, x, beta, alpha, nodes, w, pi, denom, lp, var, d)

    @property
    def weights(self):
        """Normalized f_c weights (rows sum to one)."""
        if "fc" not in self._cache:
            self._cache["fc"] = self.fweights * self.pi_nodes / self.denom[:, None]
        return self._cache["fc"]

    def expect(self, vals):
        """E_{f_c}[g(Y)] for node values of shape ``(n, K, ...)``."""
        w = self.weights
        return np.einsum("nk,nk...->n...", w, vals)

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(in_support(y, self.selection.support)):
            raise InputError("y lies outside the selection support")
        if self.outcome.family == "logistic":
            _check_binary(y)
        logf = _logpdf_from_lp(self.outcome, y, self.lp, self.var)
        pi = selection_prob(self.selection, y, self.x, self.alpha)
        with np.errstate(divide="ignore"):
            out = logf + np.log(pi) - np.log(self.denom)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite conditional log-density")
        return out

    def score_beta(self, y):
        y = np.asarray(y, dtype=float)
        s_obs = _score_from_lp(self.outcome, y, self.lp, self.var, self.design)
        if "Es_beta" not in self._cache:
            s_nodes = _score_from_lp(self.outcome, self.nodes, self.lp[:, None], self.var, self.design)
            self._cache["Es_beta"] = self.expect(s_nodes)
        return s_obs - self._cache["Es_beta"]

    def score_alpha(self, y):
        y = np.asarray(y, dtype=float)
        obs = dlogpi_dalpha(self.selection, y, self.x, self.alpha)
        if "Es_alpha" not in self._cache:
            self._cache["Es_alpha"] = self.expect(dlogpi_dalpha(self.selection, self.nodes, self.x, self.alpha))
        return obs - self._cache["Es_alpha"]

    def integrate_over_f(self, vals):
        """``integral of g f I_D dy / integral of f pi I_D dy`` for node values ``g``."""
        return np.einsum("nk,nk...->n...", self.fweights, vals) / self.denom.reshape((-1,) + (1,) * (vals.ndim - 2))


def conditional_law(outcome, selection, x, z, beta, alpha, quad=None) -> ConditionalLaw:
    return ConditionalLaw.build(outcome, selection, x, z, beta, alpha, quad)


def conditional_density_fc(outcome, selection, y, x, z, beta, alpha, quad=None):
    """f_c(y | x, z) (``f_cc`` when D is a proper subset of the line)."""
    law = ConditionalLaw.build(outcome, selection, x, z, beta, alpha, quad)
    return np.exp(law.logpdf(np.atleast_1d(np.asarray(y, dtype=float))))


def cond_score_beta(outcome, selection, y, x, z, beta, alpha, quad=None):
    """d log f_c / d beta = s_beta(y) - E_{f_c}[s_beta(Y)]."""
    law = ConditionalLaw.build(outcome, selection, x, z, beta, alpha, quad)
    return law.score_beta(np.atleast_1d(np.asarray(y, dtype=float)))


def cond_score_alpha(outcome, selection, y, x, z, beta, alpha, quad=None):
    """d log f_c / d alpha = d log pi(y) - E_{f_c}[d log pi(Y)]."""
    law = ConditionalLaw.build(outcome, selection, x, z, beta, alpha, quad)
    return law.score_alpha(np.atleast_1d(np.asarray(y, dtype=float)))


@dataclass(frozen=True)
class ModelSpec:
    """Outcome, working and selection models for one analysis.

    ``selection_ps`` is an optional post-stratified selection model used by
    the ``*_ps`` estimators.
    """

    outcome: OutcomeModel
    working: WorkingModel
    selection: SelectionModel
    selection_ps: SelectionModel | None = None
    quadrature: QuadratureSpec | None = None

    def with_selection(self, selection: SelectionModel) -> "ModelSpec":
        return ModelSpec(self.outcome, self.working, selection, self.selection_ps, self.quadrature)

    def with_working(self, working: WorkingModel) -> "ModelSpec":
        return ModelSpec(self.outcome, working, self.selection, self.selection_ps, self.quadrature)
