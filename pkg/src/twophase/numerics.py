"""Numerical kernels shared by the estimation code.

Integration over the outcome is always reduced to a per-row quadrature rule:
arrays ``nodes`` and ``weights`` of shape ``(n, K)`` such that

    integral of g(y) f(y) I(y in D) dy  ~=  sum_k weights[:, k] * g(nodes[:, k])

where ``f`` is either a Bernoulli law or a normal law.  Three rule builders are
provided: an exact two-point sum for binary outcomes, a moment-matched
two-node rule per support interval for normal laws (exact for integrands that
are cubic polynomials on each interval), and Gauss-Hermite / Gauss-Legendre
rules for smooth non-polynomial integrands.
"""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss
from scipy import linalg
from scipy.special import erfc, log_ndtr

from .exceptions import (
    DegenerateConditioningError,
    IllConditionedWarning,
    InputError,
    NumericError,
    SingularMatrixError,
)

SQRT2 = math.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
MASS_FLOOR = 1e-300
# standardized half-width beyond which normal mass is treated as zero (~1e-33)
_CLIP = 12.0


@dataclass(frozen=True)
class Interval:
    """Half-open interval ``(lo, hi]``; either end may be infinite."""

    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InputError(f"interval requires lo < hi, got ({self.lo}, {self.hi}]")

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        return (y > self.lo) & (y <= self.hi)

    @property
    def is_whole_line(self) -> bool:
        return math.isinf(self.lo) and math.isinf(self.hi)


WHOLE_LINE = (Interval(),)


def in_support(y, support: Sequence[Interval]):
    """Boolean mask ``I(y in D)`` for a union of intervals."""
    y = np.asarray(y, dtype=float)
    mask = np.zeros(y.shape, dtype=bool)
    for iv in support:
        mask |= iv.contains(y)
    return mask


def check_disjoint(support: Sequence[Interval]) -> None:
    ivs = sorted(support, key=lambda iv: iv.lo)
    for a, b in zip(ivs, ivs[1:]):
        if b.lo < a.hi:
            raise InputError(f"support intervals overlap: {a} and {b}")


def is_whole_line(support: Sequence[Interval]) -> bool:
    """True when the intervals cover the real line with no gaps."""
    ivs = sorted(support, key=lambda iv: iv.lo)
    if not ivs or not math.isinf(ivs[0].lo) or not math.isinf(ivs[-1].hi):
        return False
    return all(a.hi == b.lo for a, b in zip(ivs, ivs[1:]))


@dataclass(frozen=True)
class QuadratureSpec:
    method: str = "truncated_normal_closed_form"
    nodes: int = 64
    abs_tol: float = 1e-10

    def __post_init__(self):
        methods = ("two_point_binary", "truncated_normal_closed_form", "gauss_hermite")
        if self.method not in methods:
            raise InputError(f"unknown quadrature method {self.method!r}")
        if self.method == "gauss_hermite" and self.nodes < 16:
            raise InputError("gauss_hermite needs at least 16 nodes")


# --------------------------------------------------------------------------
# normal distribution pieces


def norm_cdf(x):
    # erfc keeps relative accuracy deep in the lower tail
    return 0.5 * erfc(-np.asarray(x, dtype=float) / SQRT2)


def norm_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - LOG_SQRT_2PI


def norm_pdf(x):
    return np.exp(norm_logpdf(x))


def _log_mass(a, b):
    """log P(a < T <= b) for standard normal T, stable in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    upper = a > 0
    # mirror right-tail intervals to the left tail
    lo = np.where(upper, -b, a)
    hi = np.where(upper, -a, b)
    log_hi = log_ndtr(hi)
    log_lo = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.where(np.isneginf(log_lo), 0.0, np.exp(log_lo - log_hi))
        out = log_hi + np.log1p(-diff)
    return out


def _std_truncated_moments(a, b, kmax=3):
    """Mass and conditional raw moments E[T^k | a<T<=b], k=1..kmax, T ~ N(0,1)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    logz = _log_mass(a, b)
    if np.any(~(logz > math.log(MASS_FLOOR))):
        raise DegenerateConditioningError("truncated normal mass below 1e-300")
    # phi(t)/Z and t^j phi(t)/Z, with t^j phi(t) = 0 at infinite t
    ra = np.where(np.isfinite(a), np.exp(norm_logpdf(np.where(np.isfinite(a), a, 0.0)) - logz), 0.0)
    rb = np.where(np.isfinite(b), np.exp(norm_logpdf(np.where(np.isfinite(b), b, 0.0)) - logz), 0.0)
    af = np.where(np.isfinite(a), a, 0.0)
    bf = np.where(np.isfinite(b), b, 0.0)
    moments = [np.ones_like(logz), ra - rb]
    for k in range(2, kmax + 1):
        moments.append((k - 1) * moments[k - 2] + af ** (k - 1) * ra - bf ** (k - 1) * rb)
    return np.exp(logz), moments


def truncated_normal_moments(mu, sigma, interval: Interval, order: int = 2):
    """Partial moments of ``Y ~ N(mu, sigma^2)`` over an interval.

    Returns ``(mass, m1, m2)`` with ``mass = P(Y in I)``, ``m1 = E[Y I(Y in I)]``
    and ``m2 = E[Y^2 I(Y in I)]``.  Entries above ``order`` are returned as
    ``None``.  Arrays broadcast.
    """
    if order not in (0, 1, 2):
        raise InputError("order must be 0, 1 or 2")
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise InputError("sigma must be positive")
    a = (interval.lo - mu) / sigma
    b = (interval.hi - mu) / sigma
    mass, m = _std_truncated_moments(a, b, kmax=2)
    m1 = mass * (mu + sigma * m[1]) if order >= 1 else None
    m2 = mass * (mu * mu + 2 * mu * sigma * m[1] + sigma * sigma * m[2]) if order >= 2 else None
    if mass.ndim == 0:
        mass = float(mass)
        m1 = None if m1 is None else float(m1)
        m2 = None if m2 is None else float(m2)
    return mass, m1, m2


# --------------------------------------------------------------------------
# per-row quadrature rules


def binary_rule(p1, support: Sequence[Interval] = WHOLE_LINE):
    """Two-point rule for Bernoulli(p1) restricted to ``support``."""
    p1 = np.asarray(p1, dtype=float)
    vals = [v for v in (0.0, 1.0) if in_support(v, support)]
    if not vals:
        raise DegenerateConditioningError("support excludes both outcome values")
    nodes = np.broadcast_to(np.array(vals), p1.shape + (len(vals),)).copy()
    weights = np.stack([p1 if v == 1.0 else 1.0 - p1 for v in vals], axis=-1)
    return nodes, weights


def truncnorm_rule(mu, sigma, support: Sequence[Interval] = WHOLE_LINE):
    """Two nodes per interval reproducing mass and the first three moments.

    Exact for any integrand that is a polynomial of degree <= 3 on each
    interval, which covers every integrand arising with piecewise-constant
    selection probabilities and linear working models.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    nodes, weights = [], []
    for iv in support:
        mass, m = _std_truncated_moments((iv.lo - mu) / sigma, (iv.hi - mu) / sigma, kmax=3)
        c = m[1]
        var = np.maximum(m[2] - c * c, 1e-300)
        k3 = m[3] - 3 * c * m[2] + 2 * c ** 3
        gamma = k3 / var
        disc = np.sqrt(gamma * gamma + 4 * var)
        u_plus = 0.5 * (gamma + disc)
        u_minus = 0.5 * (gamma - disc)
        w_plus = -u_minus / disc
        w_minus = u_plus / disc
        nodes += [mu + sigma * (c + u_minus), mu + sigma * (c + u_plus)]
        weights += [mass * w_minus, mass * w_plus]
    return np.stack(nodes, axis=-1), np.stack(weights, axis=-1)


_GH_CACHE: dict = {}
_GL_CACHE: dict = {}


def _hermgauss(k):
    if k not in _GH_CACHE:
        _GH_CACHE[k] = hermgauss(k)
    return _GH_CACHE[k]


def _leggauss(k):
    if k not in _GL_CACHE:
        _GL_CACHE[k] = leggauss(k)
    return _GL_CACHE[k]


def gauss_rule(mu, sigma, support: Sequence[Interval] = WHOLE_LINE, n_nodes: int = 64):
    """Quadrature for smooth integrands against a normal law on ``support``.

    The whole line uses Gauss-Hermite centred at ``mu`` and scaled by
    ``sigma``.  A proper support is split at interval ends and each piece,
    clipped to ``mu +/- 12 sigma``, gets its own Gauss-Legendre rule in
    standardized coordinates.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if is_whole_line(support):
        t, w = _hermgauss(n_nodes)
        nodes = mu[..., None] + SQRT2 * sigma[..., None] * t
        weights = np.broadcast_to(w / math.sqrt(math.pi), nodes.shape).copy()
        return nodes, weights
    t, w = _leggauss(n_nodes)
    nodes, weights = [], []
    for iv in support:
        a = np.clip((iv.lo - mu) / sigma, -_CLIP, _CLIP)
        b = np.clip((iv.hi - mu) / sigma, -_CLIP, _CLIP)
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        s = mid[..., None] + half[..., None] * t
        nodes.append(mu[..., None] + sigma[..., None] * s)
        weights.append(half[..., None] * w * norm_pdf(s))
    return np.concatenate(nodes, axis=-1), np.concatenate(weights, axis=-1)


def integrate_y(
    integrand: Callable,
    *,
    mu=None,
    sigma=None,
    p=None,
    support: Sequence[Interval] = WHOLE_LINE,
    spec: QuadratureSpec | None = None,
):
    """Integrate ``integrand(y)`` against an outcome law restricted to ``support``.

    Pass ``p`` for a Bernoulli law (``P(Y=1) = p``) or ``mu``/``sigma`` for a
    normal law.  ``integrand`` must accept an array of nodes.
    """
    check_disjoint(support)
    if spec is None:
        spec = QuadratureSpec("two_point_binary" if p is not None else "truncated_normal_closed_form")
    if spec.method == "two_point_binary":
        if p is None:
            raise InputError("two_point_binary needs p")
        nodes, weights = binary_rule(p, support)
    else:
        if mu is None or sigma is None:
            raise InputError(f"{spec.method} needs mu and sigma")
        if np.any(np.asarray(sigma) <= 0):
            raise InputError("sigma must be positive")
        if spec.method == "truncated_normal_closed_form":
            nodes, weights = truncnorm_rule(mu, sigma, support)
        else:
            nodes, weights = gauss_rule(mu, sigma, support, spec.nodes)
    vals = np.asarray(integrand(nodes), dtype=float)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        where = np.asarray(nodes)[np.broadcast_to(bad, np.shape(nodes))]
        raise NumericError(f"non-finite integrand at y = {where[:5].tolist()}")
    out = np.sum(weights * vals, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# derivatives and linear algebra


def default_step(x0, rel=1e-5):
    x0 = np.asarray(x0, dtype=float)
    return rel * np.maximum(1.0, np.abs(x0))


def finite_diff_jacobian(f: Callable, x0, step=None):
    """Central-difference Jacobian of ``f`` at ``x0``.

    ``f`` may return an array of any shape; the result has shape
    ``f(x0).shape + (len(x0),)``.  ``step`` is a scalar relative step, an
    array of absolute steps, or a callable mapping ``x0`` to steps.  The
    default is ``1e-5 * max(1, |x0_j|)``.
    """
    x0 = np.asarray(x0, dtype=float)
    if step is None:
        h = default_step(x0)
    elif callable(step):
        h = np.asarray(step(x0), dtype=float)
    elif np.ndim(step) == 0:
        h = default_step(x0, float(step))
    else:
        h = np.asarray(step, dtype=float)
    cols = []
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = h[j]
        fp = np.asarray(f(x0 + e), dtype=float)
        fm = np.asarray(f(x0 - e), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericError(f"non-finite function value probing coordinate {j}")
        cols.append((fp - fm) / (2 * h[j]))
    return np.stack(cols, axis=-1)


def condition_number(a) -> float:
    a = np.asarray(a, dtype=float)
    with np.errstate(all="ignore"):
        return float(np.linalg.cond(a, 1))


def _check_cond(a, warn_cond):
    cond = condition_number(a)
    if not np.isfinite(cond):
        raise SingularMatrixError("matrix is singular")
    if cond > warn_cond:
        warnings.warn(f"condition number {cond:.3g} exceeds {warn_cond:.3g}", IllConditionedWarning, stacklevel=3)
    return cond


def solve_linear(a, b, warn_cond: float = 1e12):
    """Solve ``a x = b`` by pivoted LU.  Warns when ill-conditioned."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("solve_linear needs a square matrix")
    _check_cond(a, warn_cond)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            lu = linalg.lu_factor(a, check_finite=True)
    except (ValueError, linalg.LinAlgError) as exc:
        raise SingularMatrixError(str(exc)) from exc
    if np.any(np.diag(lu[0]) == 0):
        raise SingularMatrixError("matrix is exactly singular")
    return linalg.lu_solve(lu, np.asarray(b, dtype=float))


def psd_inverse(a, warn_cond: float = 1e12):
    """Inverse of a symmetric matrix via Bunch-Kaufman (pivoted LDL^T)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("psd_inverse needs a square matrix")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise InputError("psd_inverse needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    _check_cond(a, warn_cond)
    lu, d, perm = linalg.ldl(a)
    # invert through the factor; d is block diagonal with 1x1/2x2 blocks
    if np.any(np.abs(np.linalg.eigvalsh(d)) == 0):
        raise SingularMatrixError("matrix is exactly singular")
    linv = np.linalg.inv(lu)
    inv = linv.T @ np.linalg.inv(d) @ linv
    return 0.5 * (inv + inv.T)


# --------------------------------------------------------------------------
# random streams


def rng_stream(master_seed: int, replication: int = 0, purpose: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by seed, replication and purpose.

    Equal keys give bit-identical streams regardless of call order or the
    process that draws them.
    """
    tag = zlib.crc32(purpose.encode("utf-8"))
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(replication), tag))
    return np.random.Generator(np.random.Philox(seq))
