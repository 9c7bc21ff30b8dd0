"""Variance estimation: estimating-equation sandwich and closed-form asymptotic variances.

Matrix orientation used throughout (``p = dim beta``, ``q = dim theta``)::

    S      p x p   E{R s_c s_c'}
    J      p x q   E{R d u' / d beta}
    Omega  q x q   E{R u u'}
    U      q x p   E{R h s_c'}
    V      q x q   E{R h u'}
    W      q x q   E{h h'}
    H      q x q   working-score adjustment for the zero-probability case

``s_c`` is the conditional score in beta and ``u`` is replaced by ``v`` in the
zero-probability case.  ``H`` is stored in the normalization under which

    Sigma = A^-1 {S + J O^-1 H W^-1 U + U' W^-1 H' O^-1 J'
                  + J O^-1 (O - H W^-1 V - V' W^-1 H' + H W^-1 H') O^-1 J'} A^-1,
    A = S + J O^-1 J',

is the asymptotic variance of the plug-in estimator: ``H = -E{R dv/dtheta'} K^-1 W``
with ``K = -E{dh/dtheta'}``.  When ``h`` is a unit-information score and
``D`` is the whole line, ``H = W`` and the formula reduces to the
positive-probability form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .exceptions import InputError, SingularMatrixError
from .numerics import finite_diff_jacobian, psd_inverse


def sandwich_variance(rows, jacobian, warn_cond: float = 1e12):
    """Asymptotic covariance ``[G' Omega^-1 G]^-1`` of ``sqrt(N)(eta_hat - eta)``.

    Parameters
    ----------
    rows : ndarray, shape (N, k)
        Estimating-function rows at the solution.
    jacobian : ndarray, shape (N, k, q)
        Per-row derivatives of ``rows`` in ``eta``.

    Returns
    -------
    ndarray, shape (q, q)
        Divide by ``N`` for the covariance of ``eta_hat``.
    """
    rows = np.asarray(rows, dtype=float)
    jacobian = np.asarray(jacobian, dtype=float)
    if jacobian.ndim != 3 or jacobian.shape[:2] != rows.shape:
        raise InputError("jacobian must have shape rows.shape + (q,)")
    n = rows.shape[0]
    g_bar = jacobian.mean(axis=0)
    omega = rows.T @ rows / n
    try:
        omega_inv = psd_inverse(omega, warn_cond=warn_cond)
        bread = g_bar.T @ omega_inv @ g_bar
        return psd_inverse(0.5 * (bread + bread.T), warn_cond=warn_cond)
    except SingularMatrixError as exc:
        rank = np.linalg.matrix_rank(g_bar)
        raise SingularMatrixError(f"singular sandwich bread (Jacobian rank {rank} of {g_bar.shape[1]})") from exc


@dataclass(frozen=True)
class MomentBlocks:
    """Population moments (estimated by sample means) entering the closed forms."""

    S: np.ndarray
    J: np.ndarray
    Omega: np.ndarray
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    W: np.ndarray | None = None
    H: np.ndarray | None = None
    C: np.ndarray | None = None
    n: int | None = None
    zero_prob: bool = False
    se: dict | None = None


def _inv(a):
    return psd_inverse(0.5 * (a + a.T))


def closed_form_avar(kind: str, blocks: MomentBlocks):
    """Closed-form asymptotic variance of ``sqrt(n)(beta_hat - beta0)``.

    ``kind`` is one of ``pi_theta_star`` and ``pi_theta0_tilde`` (theta held
    at its limit), ``pi_theta_hat`` and ``pi_theta_hat_tilde`` (theta
    estimated from Phase 1), or ``cml``.
    """
    S, J, O = (np.asarray(b, dtype=float) for b in (blocks.S, blocks.J, blocks.Omega))
    p = S.shape[0]
    if S.shape != (p, p) or J.shape[0] != p or O.shape != (J.shape[1], J.shape[1]):
        raise InputError("nonconformable S, J, Omega")
    if kind == "cml":
        return _inv(S)
    O_inv = _inv(O)
    A_inv = _inv(S + J @ O_inv @ J.T)
    if kind in ("pi_theta_star", "pi_theta0_tilde"):
        return A_inv
    if kind not in ("pi_theta_hat", "pi_theta_hat_tilde"):
        raise InputError(f"unknown variance kind {kind!r}")
    U, V, W = blocks.U, blocks.V, blocks.W
    if U is None or V is None or W is None:
        raise InputError(f"{kind} needs U, V and W")
    U, V, W = (np.asarray(b, dtype=float) for b in (U, V, W))
    q = O.shape[0]
    if U.shape != (q, p) or V.shape != (q, q) or W.shape != (q, q):
        raise InputError("nonconformable U, V, W")
    if kind == "pi_theta_hat":
        M = np.eye(q)
    else:
        if blocks.H is None:
            raise InputError("pi_theta_hat_tilde needs H")
        M = np.asarray(blocks.H, dtype=float) @ _inv(W)
    JO = J @ O_inv
    mid = (S + JO @ M @ U + U.T @ M.T @ JO.T
           + JO @ (O - M @ V - V.T @ M.T + M @ W @ M.T) @ JO.T)
    out = A_inv @ mid @ A_inv
    return 0.5 * (out + out.T)


def estimate_moment_blocks(data, models, beta, alpha, theta, zero_prob=None, full_z: bool = False):
    """Sample-mean estimates of the moment blocks at ``(beta, alpha, theta)``.

    Means are over all Phase-1 rows; Phase-2 quantities carry the factor R.
    With ``full_z=True`` (simulation use, ``z`` observed for everyone) the
    matrix ``C = E{s_c h'}`` over the whole population is also returned, and
    ``se`` holds Monte Carlo standard errors of the entries of ``J - C`` and
    of ``E{R s_c u'}``.
    """
    from .constraints import ConstraintProblem
    from .models import ConditionalLaw, working_score

    beta = np.asarray(beta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    prob = ConstraintProblem("el_pi_theta_2", data, models, alpha=alpha, theta=theta, zero_prob=zero_prob)
    n = data.n
    p2 = data.phase2
    pb = beta.size
    g = prob.rows(beta)  # (m, p + q): s_c, u
    s_c, u = g[:, :pb], g[:, pb:]
    q = u.shape[1]
    dg_dbeta = finite_diff_jacobian(prob.rows, beta)  # (m, p+q, p)
    du_dbeta = dg_dbeta[:, pb:, :]
    h_all = working_score(models.working, data.y, data.x, theta)
    h2 = h_all[p2]
    S = s_c.T @ s_c / n
    J = np.einsum("mkj->jk", du_dbeta) / n
    O = u.T @ u / n
    U = h2.T @ s_c / n
    V = h2.T @ u / n
    W = h_all.T @ h_all / n
    H = None
    if prob.zero_prob:
        def v_of_theta(t):
            p = ConstraintProblem("el_pi_theta_1", data, models, alpha=alpha, theta=t, zero_prob=True)
            return p.rows(beta)
        dv = finite_diff_jacobian(v_of_theta, theta).sum(axis=0) / n  # (q, q)
        dh = finite_diff_jacobian(lambda t: working_score(models.working, data.y, data.x, t), theta).sum(axis=0) / n
        K = -dh
        H = -dv @ np.linalg.solve(K, W)
    C = None
    se = None
    if full_z:
        law = ConditionalLaw.build(models.outcome, models.selection, data.x, data.z, beta, alpha, models.quadrature)
        s_full = law.score_beta(data.y)
        C = s_full.T @ h_all / n
        # per-row contributions for Monte Carlo standard errors
        jr = np.zeros((n, pb, q))
        jr[p2] = np.transpose(du_dbeta, (0, 2, 1))
        diff = jr - s_full[:, :, None] * h_all[:, None, :]
        su = np.zeros((n, pb, q))
        su[p2] = s_c[:, :, None] * u[:, None, :]
        se = {
            "J_minus_C": diff.std(axis=0, ddof=1) / np.sqrt(n),
            "R_s_u": su.std(axis=0, ddof=1) / np.sqrt(n),
            "R_s_u_mean": su.mean(axis=0),
        }
    return MomentBlocks(S, J, O, U, V, W, H, C, n, bool(prob.zero_prob), se)


@dataclass(frozen=True)
class WaldRow:
    name: str
    estimate: float
    se: float
    z: float
    p_value: float
    lower: float
    upper: float


def wald_summary(fit, se=None, names=None, level: float = 0.95) -> list:
    """Per-coefficient Wald statistics with two-sided normal p-values.

    ``fit`` is a fitted result (with ``beta``, ``se`` and ``beta_names``) or
    an array of estimates accompanied by ``se``.
    """
    if hasattr(fit, "beta"):
        estimates, se, names = fit.beta, fit.se, names or list(fit.beta_names)
    else:
        estimates = fit
    if se is None:
        raise InputError("standard errors are required")
    estimates = np.atleast_1d(np.asarray(estimates, dtype=float))
    se = np.atleast_1d(np.asarray(se, dtype=float))
    names = names or [f"b{j}" for j in range(estimates.size)]
    if not 0 < level < 1:
        raise InputError("level must lie in (0, 1)")
    crit = stats.norm.ppf(0.5 + level / 2)
    out = []
    for nm, est, s in zip(names, estimates, se):
        z = est / s if s > 0 else np.nan
        p = 2 * stats.norm.sf(abs(z)) if np.isfinite(z) else np.nan
        out.append(WaldRow(nm, float(est), float(s), float(z), float(p), float(est - crit * s), float(est + crit * s)))
    return out
