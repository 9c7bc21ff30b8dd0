"""Empirical-likelihood augmented conditional likelihood for two-phase outcome-dependent samples."""
from .constraints import ConstraintProblem, assemble_constraints, rank_check
from .data import Dataset, ObservationRecord
from .estimators import (
    ESTIMATORS,
    ELOptions,
    FitResult,
    el_inner_lambda,
    el_profile_loglik,
    fit_cml,
    fit_el,
    fit_selection_mle,
    fit_sw,
    fit_working,
    run_estimator,
)
from .exceptions import *  # noqa: F401,F403
from .inference import closed_form_avar, estimate_moment_blocks, sandwich_variance, wald_summary
from .models import ModelSpec, OutcomeModel, QuadratureSpec, SelectionModel, WorkingModel
from .numerics import WHOLE_LINE, Interval

__version__ = "0.1.0"
