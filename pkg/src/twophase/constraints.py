"""Phase-1 information constraints and per-subject estimating-function rows.

Each estimator variant is an empirical-likelihood (or estimating-equation)
problem over a matrix of per-subject rows ``g_i(eta)``.  The variants are

``el_pi_theta_1``   Phase-2 rows ``(u)``; the conditional log-likelihood is
                    added to the objective.  ``eta = beta``.
``el_pi_theta_2``   Phase-2 rows ``(s_c_beta, u)``.  ``eta = beta``.
``el3``             all rows ``(R s_c_beta, R u, s_alpha, h)``.
``el4``             all rows ``(R s_c_beta, R u, R s_c_alpha, s_alpha, h)``.
``el5``             all rows ``(R s_c_beta, R u, s_alpha - R s_c_alpha, h)``.
``sw``              all rows ``(R s_c_beta, s_alpha - R s_c_alpha)``; just
                    identified in ``eta = (beta, alpha)``.

For el3/el4/el5, ``eta = (beta, alpha, theta)``.  When the selection support
``D`` is a proper subset of the line, ``u`` is replaced by ``v`` (which
centres ``h`` at its truncated working-law mean ``h*``), the conditional law
becomes ``f_cc`` and ``s_alpha`` is multiplied by ``S = I(y in D)``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .exceptions import InputError, WrongVariantError
from .models import ConditionalLaw, ModelSpec, WorkingModel, selection_score, working_rule, working_score
from .numerics import WHOLE_LINE

VARIANTS = ("el_pi_theta_1", "el_pi_theta_2", "el3", "el4", "el5", "sw")
JOINT_VARIANTS = ("el3", "el4", "el5")


def _law(models: ModelSpec, x, z, beta, alpha):
    return ConditionalLaw.build(models.outcome, models.selection, x, z, beta, alpha, models.quadrature)


def u_constraint(x, z, beta, alpha, theta, models: ModelSpec):
    """u(x, z) = integral of h(y, x; theta) / pi(y, x) f_c(y | x, z) dy, one row per subject."""
    if models.selection.proper_support:
        raise WrongVariantError("selection probability vanishes on part of the line; use v_constraint")
    law = _law(models, x, z, beta, alpha)
    return law.integrate_over_f(working_score(models.working, law.nodes, law.x, theta))


def h_star(x, theta, working: WorkingModel, support=WHOLE_LINE):
    """E[h(Y, x; theta) | x, Y in D] under the working law."""
    nodes, weights = working_rule(working, x, theta, support)
    h = working_score(working, nodes, x, theta)
    return np.einsum("nk,nkq->nq", weights, h) / weights.sum(axis=1)[:, None]


def v_constraint(x, z, beta, alpha, theta, models: ModelSpec, support=None):
    """v(x, z) = integral over D of (h - h*) / pi f_cc dy."""
    support = models.selection.support if support is None else support
    law = _law(models, x, z, beta, alpha)
    hs = h_star(law.x, theta, models.working, support)
    h = working_score(models.working, law.nodes, law.x, theta)
    return law.integrate_over_f(h - hs[:, None, :])


@dataclass(frozen=True)
class ConstraintSet:
    """Constraint rows of one variant at one parameter value.

    ``blocks`` maps block labels to column slices of ``rows``; ``index``
    holds the dataset row of each constraint row.
    """

    variant: str
    rows: np.ndarray
    blocks: tuple
    subject_scope: str
    eta_layout: dict
    index: np.ndarray
    zero_prob: bool = False

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def labels(self) -> list:
        out = []
        for name, sl in self.blocks:
            out += [f"{name}[{k}]" for k in range(sl.stop - sl.start)]
        return out


@dataclass(frozen=True)
class RankReport:
    rank: int
    dim: int
    singular_values: np.ndarray
    dependent: list

    @property
    def deficient(self) -> bool:
        return self.rank < self.dim


def rank_check(cs: ConstraintSet, rtol: float = 1e-10) -> RankReport:
    """Numerical rank of the stacked row matrix and the coordinates involved in near dependencies."""
    g = cs.rows
    if g.shape[0] < 2:
        raise InputError("rank_check needs at least two rows")
    # the row space is invariant to scaling rows; normalize columns for a fair tolerance
    scale = np.sqrt(np.mean(g * g, axis=0))
    scale[scale == 0] = 1.0
    _, sv, vt = np.linalg.svd(g / scale, full_matrices=False)
    tol = rtol * sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > tol))
    labels = cs.labels()
    dependent = set()
    for vec in vt[rank:]:
        dependent.update(labels[k] for k in np.flatnonzero(np.abs(vec) > 0.1))
    # zero columns are dependent trivially
    dependent.update(labels[k] for k in np.flatnonzero(np.all(g == 0, axis=0)))
    return RankReport(rank, g.shape[1], sv, sorted(dependent))


@dataclass
class ConstraintProblem:
    """Row generator for one variant on one dataset.

    ``alpha`` and ``theta`` are the fixed nuisance values for the variants
    that do not estimate them (``el_pi_theta_*`` fix both, ``sw`` fixes
    ``theta`` which it does not use).  ``zero_prob`` defaults to whether the
    selection support is a proper subset of the line; setting it to True on a
    whole-line design gives the zero-probability formulas (which then reduce
    to the positive-probability ones).
    """

    variant: str
    data: Dataset
    models: ModelSpec
    alpha: np.ndarray | None = None
    theta: np.ndarray | None = None
    zero_prob: bool | None = None
    cache_size: int = 64
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        proper = self.models.selection.proper_support
        if self.zero_prob is None:
            self.zero_prob = proper
        elif proper and not self.zero_prob:
            raise WrongVariantError("selection support is proper; the zero-probability formulas are required")
        if self.data.z.shape[1] == 0 and self.models.outcome.z_cols:
            raise InputError("dataset has no z columns")
        p2 = self.data.phase2
        if p2.size == 0:
            raise InputError("no Phase-2 rows")
        self._p2 = p2
        self._x2 = self.data.x[p2]
        self._z2 = self.data.z[p2]
        self._y2 = self.data.y[p2]
        if self.variant.startswith("el_pi_theta"):
            if self.alpha is None or self.theta is None:
                raise InputError(f"{self.variant} needs fixed alpha and theta")
        pb = self.models.outcome.n_params
        pa = self.models.selection.n_params
        pt = self.models.working.n_params
        if self.variant.startswith("el_pi_theta"):
            self.layout = {"beta": slice(0, pb)}
        elif self.variant == "sw":
            self.layout = {"beta": slice(0, pb), "alpha": slice(pb, pb + pa)}
        else:
            self.layout = {"beta": slice(0, pb), "alpha": slice(pb, pb + pa), "theta": slice(pb + pa, pb + pa + pt)}
        self.n_eta = max(sl.stop for sl in self.layout.values())
        self.scope = "phase2_only" if self.variant.startswith("el_pi_theta") else "all_phase1"
        self.blocks = self._block_layout(pb, pa, pt)

    # ---------------------------------------------------------------- layout
    def _block_layout(self, pb, pa, pt):
        info = "v" if self.zero_prob else "u"
        spec = {
            "el_pi_theta_1": [(info, pt)],
            "el_pi_theta_2": [("s_c_beta", pb), (info, pt)],
            "el3": [("s_c_beta", pb), (info, pt), ("s_alpha", pa), ("h", pt)],
            "el4": [("s_c_beta", pb), (info, pt), ("s_c_alpha", pa), ("s_alpha", pa), ("h", pt)],
            "el5": [("s_c_beta", pb), (info, pt), ("s_alpha_residual", pa), ("h", pt)],
            "sw": [("s_c_beta", pb), ("s_alpha_residual", pa)],
        }[self.variant]
        out, start = [], 0
        for name, k in spec:
            out.append((name, slice(start, start + k)))
            start += k
        return tuple(out)

    @property
    def dim(self) -> int:
        return self.blocks[-1][1].stop

    @property
    def index(self) -> np.ndarray:
        return self._p2 if self.scope == "phase2_only" else np.arange(self.data.n)

    @property
    def n_rows(self) -> int:
        return self.index.size

    def split_eta(self, eta):
        eta = np.asarray(eta, dtype=float)
        if eta.size != self.n_eta:
            raise InputError(f"eta has {eta.size} entries, variant {self.variant} needs {self.n_eta}")
        beta = eta[self.layout["beta"]]
        alpha = eta[self.layout["alpha"]] if "alpha" in self.layout else np.asarray(self.alpha, dtype=float)
        theta = eta[self.layout["theta"]] if "theta" in self.layout else (
            None if self.theta is None else np.asarray(self.theta, dtype=float))
        return beta, alpha, theta

    # ---------------------------------------------------------------- pieces
    def phase2_law(self, beta, alpha) -> ConditionalLaw:
        return _law(self.models, self._x2, self._z2, beta, alpha)

    def _info(self, law, theta):
        h = working_score(self.models.working, law.nodes, law.x, theta)
        if self.zero_prob:
            hs = h_star(law.x, theta, self.models.working, self.models.selection.support)
            h = h - hs[:, None, :]
        return law.integrate_over_f(h)

    def loglik(self, beta, alpha=None):
        """Conditional log-likelihood over Phase-2 rows and its per-row scores."""
        alpha = self.alpha if alpha is None else alpha
        law = self.phase2_law(beta, alpha)
        return float(np.sum(law.logpdf(self._y2))), law.score_beta(self._y2)

    # ------------------------------------------------------------------ rows
    def rows(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        key = eta.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        g = self._compute(eta)
        g.setflags(write=False)
        self._cache[key] = g
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return g

    def _compute(self, eta):
        beta, alpha, theta = self.split_eta(eta)
        law = self.phase2_law(beta, alpha)
        parts2 = {}
        for name, _ in self.blocks:
            if name == "s_c_beta":
                parts2[name] = law.score_beta(self._y2)
            elif name in ("u", "v"):
                parts2[name] = self._info(law, theta)
            elif name in ("s_c_alpha", "s_alpha_residual"):
                parts2["s_c_alpha"] = law.score_alpha(self._y2)
        if self.scope == "phase2_only":
            return np.concatenate([parts2[name] for name, _ in self.blocks], axis=1)
        n = self.data.n
        p2 = self._p2
        g = np.zeros((n, self.dim))
        need_salpha = any(name in ("s_alpha", "s_alpha_residual") for name, _ in self.blocks)
        if need_salpha:
            s_alpha = selection_score(self.models.selection, self.data.y, self.data.x, self.data.r, alpha)
            s_alpha = s_alpha * self.data.s[:, None]
        for name, sl in self.blocks:
            if name in ("s_c_beta", "u", "v", "s_c_alpha"):
                g[p2, sl] = parts2[name]
            elif name == "s_alpha":
                g[:, sl] = s_alpha
            elif name == "s_alpha_residual":
                g[:, sl] = s_alpha
                g[p2, sl] -= parts2["s_c_alpha"]
            elif name == "h":
                g[:, sl] = working_score(self.models.working, self.data.y, self.data.x, theta)
        return g

    def constraint_set(self, eta) -> ConstraintSet:
        return ConstraintSet(self.variant, self.rows(eta), self.blocks, self.scope, dict(self.layout),
                             self.index, bool(self.zero_prob))


def assemble_constraints(variant, dataset: Dataset, eta, models: ModelSpec, *, alpha=None, theta=None,
                         zero_prob=None) -> ConstraintSet:
    """Constraint rows of ``variant`` at ``eta`` (see module docstring for layouts)."""
    problem = ConstraintProblem(variant, dataset, models, alpha=alpha, theta=theta, zero_prob=zero_prob)
    return problem.constraint_set(eta)
