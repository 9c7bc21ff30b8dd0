"""Simulation designs, Phase-2 samplers and the replication engine.

Four built-in designs share one generator:

``logistic_expensive``
    binary Y with logit P(Y=1) = b_c + b_X X + b_Z Z; X is the tertile
    category (0, 1, 2) of a standard normal X~ correlated with Z;
    logistic selection in Y.
``logistic_surrogate``
    binary Y with logit P(Y=1) = b_c + b_Z Z; X is a continuous surrogate
    of Z; logistic selection in Y.
``linear_expensive``
    Gaussian Y with mean b_c + b_X X + b_Z Z; X categorical as above;
    stratified tail sampling in Y.
``linear_surrogate``
    Gaussian Y with mean b_c + b_Z Z; X a continuous surrogate;
    stratified tail sampling.

``custom`` uses the same generator with every switch set explicitly.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import Dataset
from .exceptions import ConfigError, TwoPhaseError
from .models import ModelSpec, OutcomeModel, SelectionModel, WorkingModel, selection_prob
from .numerics import WHOLE_LINE, Interval, rng_stream

log = logging.getLogger(__name__)

DESIGNS = ("logistic_expensive", "logistic_surrogate", "linear_expensive", "linear_surrogate", "custom")

_DESIGN_SWITCHES = {
    # family, x categorical, x in outcome, selection form, ps kind
    "logistic_expensive": ("logistic", True, True, "logistic", "cells"),
    "logistic_surrogate": ("logistic", False, False, "logistic", "linear"),
    "linear_expensive": ("linear_gaussian", True, True, "stratified", "cells"),
    "linear_surrogate": ("linear_gaussian", False, False, "stratified", "cells"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``strata`` lists ``(lo, hi]`` pairs of the selection support (empty for
    the whole line; ``None`` bounds are infinite).  ``x_cuts`` are the tertile cut points used both to
    categorize X in the expensive-covariate designs and to define
    post-stratification cells.  For ``custom`` the fields ``family``,
    ``x_categorical``, ``x_in_outcome``, ``selection_form`` and ``ps_kind``
    must be given; for built-in designs they are implied.
    """

    design: str
    n: int
    beta0: tuple
    alpha0: tuple
    rho: float = 0.1
    strata: tuple = ()
    x_cuts: tuple = (-0.44, 0.44)
    post_stratification: bool = True
    replications: int = 200
    master_seed: int = 20240601
    estimators: tuple = ("cml_pihat", "el5")
    family: str | None = None
    x_categorical: bool | None = None
    x_in_outcome: bool | None = None
    selection_form: str | None = None
    ps_kind: str | None = None

    def __post_init__(self):
        strata = tuple((-_INF if lo is None else float(lo), _INF if hi is None else float(hi)) for lo, hi in self.strata)
        object.__setattr__(self, "strata", strata)
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; choose from {DESIGNS}")
        if self.n < 50:
            raise ConfigError("n must be at least 50")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if not -1 < self.rho < 1:
            raise ConfigError("rho must lie in (-1, 1)")
        if self.design == "custom":
            missing = [k for k in ("family", "x_categorical", "x_in_outcome", "selection_form", "ps_kind")
                       if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"custom design needs {', '.join(missing)}")
        sw = self.switches
        n_beta = 2 + sw[2] + (sw[0] == "linear_gaussian")
        if len(self.beta0) != n_beta:
            raise ConfigError(f"beta0 needs {n_beta} entries for this design")
        if sw[3] == "stratified" and len(self.alpha0) != len(self.strata):
            raise ConfigError("stratified selection needs one alpha per stratum")
        if sw[3] == "logistic" and len(self.alpha0) != 2:
            raise ConfigError("logistic selection needs alpha0 = (intercept, slope)")
        if sw[0] == "linear_gaussian" and not self.beta0[-1] > 0:
            raise ConfigError("outcome variance must be positive")

    @property
    def switches(self) -> tuple:
        if self.design == "custom":
            return (self.family, self.x_categorical, self.x_in_outcome, self.selection_form, self.ps_kind)
        return _DESIGN_SWITCHES[self.design]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strata"] = [[None if math.isinf(v) else float(v) for v in s] for s in self.strata]
        for k in ("beta0", "alpha0", "x_cuts", "estimators"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for k in ("beta0", "alpha0", "x_cuts", "estimators"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


_INF = float("inf")

PRESETS = {
    "table1": ScenarioConfig("logistic_expensive", 8000, (-4.0, 1.0, 1.0), (-3.5, 2.3), rho=0.1),
    "table2": ScenarioConfig("logistic_surrogate", 8000, (-3.3, 1.0), (-3.5, 3.5), rho=0.9),
    "table3": ScenarioConfig("linear_expensive", 2000, (0.0, 1.0, 1.0, 4.0), (0.3, 0.5), rho=0.1,
                             strata=((-_INF, -0.63), (2.63, _INF))),
    "table4": ScenarioConfig("linear_surrogate", 2000, (0.0, 1.0, 4.0), (0.3, 0.5), rho=0.9,
                             strata=((-_INF, -1.52), (1.52, _INF))),
}
PRESETS["table5"] = replace(PRESETS["table4"], rho=0.7)


def preset(name: str, **overrides) -> ScenarioConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


def _intervals(strata):
    return tuple(Interval(-math.inf if lo is None else lo, math.inf if hi is None else hi) for lo, hi in strata)


def scenario_models(config: ScenarioConfig) -> ModelSpec:
    """Outcome, working and selection models (carrying the true values) for a scenario."""
    family, x_cat, x_in, form, ps_kind = config.switches
    outcome = OutcomeModel(family, x_cols=(0,) if x_in else (), z_cols=(0,), beta=np.asarray(config.beta0, float))
    working = WorkingModel(family, x_cols=(0,))
    alpha0 = np.asarray(config.alpha0, dtype=float)
    strata = _intervals(config.strata)
    if form == "logistic":
        selection = SelectionModel("logistic", strata=strata, alpha=alpha0)
    else:
        selection = SelectionModel("stratified", strata=strata, alpha=alpha0)
    ps = None
    if config.post_stratification:
        if ps_kind == "linear":
            ps = SelectionModel(form, strata=strata, x_linear=(0,))
        else:
            cuts = (0.5, 1.5) if x_cat else tuple(config.x_cuts)
            ps = SelectionModel(form, strata=strata, x_col=0, x_cuts=cuts)
    return ModelSpec(outcome, working, selection, ps)


def generate_phase1(config: ScenarioConfig, rep_index: int = 0) -> Dataset:
    """Phase-1 sample with ``z`` observed for everyone and ``r = 1``.

    The selection support is not applied here; see :func:`phase2_sample`.
    """
    family, x_cat, x_in, _, _ = config.switches
    rng = rng_stream(config.master_seed, rep_index, "phase1")
    n = config.n
    u = rng.standard_normal((n, 2))
    xt = u[:, 0]
    z = config.rho * xt + math.sqrt(1 - config.rho ** 2) * u[:, 1]
    x = np.searchsorted(np.asarray(config.x_cuts), xt, side="left").astype(float) if x_cat else xt
    beta = np.asarray(config.beta0, dtype=float)
    lp = beta[0] + (beta[1] * x if x_in else 0.0) + beta[1 + x_in] * z
    if family == "logistic":
        y = (rng.random(n) < expit(lp)).astype(float)
    else:
        y = lp + math.sqrt(beta[-1]) * rng.standard_normal(n)
    return Dataset.from_arrays(y, x[:, None], z[:, None], np.ones(n, dtype=np.int8), WHOLE_LINE,
                               x_names=("X",), z_names=("Z",), mask_z=False)


def phase2_sample(dataset: Dataset, selection: SelectionModel, rep_index: int = 0, master_seed: int = 0,
                  alpha=None, mask_z: bool = True) -> Dataset:
    """Independent Bernoulli Phase-2 draws with probability ``pi(y, x)``.

    ``alpha`` defaults to the values stored on ``selection``.  Setting
    ``mask_z=False`` keeps the latent ``z`` (used for Monte Carlo checks).
    """
    alpha = selection.alpha if alpha is None else alpha
    if alpha is None:
        raise ConfigError("selection probabilities are not set")
    rng = rng_stream(master_seed, rep_index, "phase2")
    pi = selection_prob(selection, dataset.y, dataset.x, alpha)
    r = (rng.random(dataset.n) < pi).astype(np.int8)
    return Dataset.from_arrays(dataset.y, dataset.x, dataset.z, r, selection.support, dataset.y_name,
                               dataset.x_names, dataset.z_names, mask_z=mask_z)


def simulate_dataset(config: ScenarioConfig, rep_index: int = 0, mask_z: bool = True) -> Dataset:
    models = scenario_models(config)
    full = generate_phase1(config, rep_index)
    return phase2_sample(full, models.selection, rep_index, config.master_seed, mask_z=mask_z)


# --------------------------------------------------------------------------
# replications


def _one_replication(args):
    from .estimators import run_estimator

    config, rep = args
    models = scenario_models(config)
    data = simulate_dataset(config, rep)
    out = {}
    for name in config.estimators:
        try:
            res = run_estimator(name, data, models)
            out[name] = ("ok", res.beta, res.se)
        except TwoPhaseError as exc:
            out[name] = ("failed", type(exc).__name__, str(exc))
    return rep, data.m, out


@dataclass
class EstimatorSummary:
    """Aggregate metrics for one estimator.  ESE and coverage need two successes."""

    names: list
    truth: np.ndarray
    bias: np.ndarray | None
    ese: np.ndarray | None
    ase: np.ndarray | None
    coverage: np.ndarray | None
    n_success: int
    n_failed: int
    failures: dict
    unreliable: bool
    estimates: np.ndarray = field(repr=False, default=None)
    ses: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [float(v) for v in a]

        return {
            "parameters": list(self.names),
            "truth": arr(self.truth),
            "bias": arr(self.bias),
            "ese": arr(self.ese),
            "ase": arr(self.ase),
            "coverage": arr(self.coverage),
            "n_success": self.n_success,
            "n_failed": self.n_failed,
            "failures": dict(self.failures),
            "unreliable": self.unreliable,
        }


@dataclass
class SimReport:
    config: ScenarioConfig
    summaries: dict
    mean_phase2_size: float
    runtime: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {
            "config": self.config.to_dict(),
            "mean_phase2_size": float(self.mean_phase2_size),
            "estimators": {k: v.to_dict() for k, v in self.summaries.items()},
        }
        if include_runtime:
            d["runtime_seconds"] = self.runtime
        return d

    def table_rows(self) -> list:
        """Rows ``(estimator, parameter, truth, bias, ese, ase, coverage)`` in table order."""
        rows = []
        for name, s in self.summaries.items():
            for j, p in enumerate(s.names):
                def pick(a):
                    return None if a is None else float(a[j])
                rows.append((name, p, float(s.truth[j]), pick(s.bias), pick(s.ese), pick(s.ase), pick(s.coverage)))
        return rows


def summarize(names, truth, estimates, ses, failures: dict, level: float = 0.95) -> EstimatorSummary:
    from scipy.stats import norm

    truth = np.asarray(truth, dtype=float)
    est = np.asarray(estimates, dtype=float).reshape(-1, truth.size)
    se = np.asarray(ses, dtype=float).reshape(-1, truth.size)
    k = est.shape[0]
    n_failed = int(sum(failures.values()))
    total = k + n_failed
    bias = est.mean(axis=0) - truth if k else None
    ase = se.mean(axis=0) if k else None
    ese = est.std(axis=0, ddof=1) if k >= 2 else None
    crit = norm.ppf(0.5 + level / 2)
    coverage = (np.abs(est - truth) <= crit * se).mean(axis=0) if k >= 2 else None
    unreliable = total > 0 and n_failed > 0.2 * total
    return EstimatorSummary(list(names), truth, bias, ese, ase, coverage, k, n_failed, dict(failures),
                            unreliable, est, se)


def run_replications(config: ScenarioConfig, estimator_list=None, workers: int = 1, progress=None) -> SimReport:
    """Generate, sample and fit ``config.replications`` datasets.

    Replication ``r`` uses its own random streams derived from
    ``(master_seed, r)``, so the report does not depend on ``workers``.
    """
    if estimator_list is not None:
        config = replace(config, estimators=tuple(estimator_list))
    if not config.estimators:
        raise ConfigError("estimator list is empty")
    from .estimators import ESTIMATORS

    unknown = [e for e in config.estimators if e not in ESTIMATORS]
    if unknown:
        raise ConfigError(f"unknown estimators {unknown}")
    t0 = time.perf_counter()
    jobs = [(config, rep) for rep in range(config.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = []
        for j in jobs:
            results.append(_one_replication(j))
            if progress:
                progress(j[1])
    results.sort(key=lambda t: t[0])
    models = scenario_models(config)
    names = models.outcome.param_names(("X",), ("Z",))
    summaries = {}
    for name in config.estimators:
        est, ses, fails = [], [], {}
        for rep, _, out in results:
            status, a, b = out[name]
            if status == "ok":
                est.append(a)
                ses.append(b)
            else:
                fails[a] = fails.get(a, 0) + 1
                log.info("replication %d, %s failed: %s", rep, name, b)
        summaries[name] = summarize(names, config.beta0, est, ses, fails)
    mean_m = float(np.mean([m for _, m, _ in results]))
    return SimReport(config, summaries, mean_m, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# synthetic survey-style data

SURVEY_COLUMNS = ("sbp", "bmi", "age", "sodium", "satfat", "saltprep")


def synthetic_survey(n: int = 6453, seed: int = 0) -> Dataset:
    """Complete synthetic data with the blood-pressure analysis layout.

    Positive ``sbp`` (outcome), ``bmi`` and ``age`` (Phase-1 covariates) and
    three dietary covariates ``sodium``, ``satfat`` and ``saltprep``
    (ordinal, coded 0, 1, 3, 4).  Everyone has ``r = 1``.
    """
    rng = rng_stream(seed, 0, "survey")
    age = rng.uniform(18, 80, n)
    log_bmi = np.log(28.0) + 0.2 * rng.standard_normal(n) + 0.002 * (age - 48)
    fat_latent = rng.standard_normal(n)
    satfat = np.exp(np.log(25.0) + 0.5 * fat_latent + 0.3 * (log_bmi - np.log(28.0)))
    sodium = np.exp(np.log(3300.0) + 0.45 * (0.5 * fat_latent + math.sqrt(0.75) * rng.standard_normal(n)))
    saltprep = rng.choice([0.0, 1.0, 3.0, 4.0], size=n, p=[0.2, 0.3, 0.3, 0.2])
    log_sbp = (np.log(120.0) + 0.10 * (log_bmi - np.log(28.0)) + 0.0045 * (age - 48)
               + 0.01 * (np.log(sodium) - np.log(3300.0)) - 0.005 * (np.log(satfat) - np.log(25.0))
               - 0.002 * saltprep + 0.12 * rng.standard_normal(n))
    x = np.column_stack([np.exp(log_bmi), age])
    z = np.column_stack([sodium, satfat, saltprep])
    return Dataset.from_arrays(np.exp(log_sbp), x, z, None, WHOLE_LINE, "sbp", ("bmi", "age"),
                               ("sodium", "satfat", "saltprep"))
