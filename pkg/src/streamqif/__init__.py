"""Streaming quadratic inference function estimation for longitudinal data.

Batch-by-batch updating of regression coefficients and standard errors in
marginal GLMs with AR(1)-style within-subject dependence, using only
per-subject summary statistics and exponential time-decay weighting.
"""

from .engine import (BatchArrays, EngineState, SolverConfig, StreamSession,
                     SubjectSummary, default_q_candidates, init_state,
                     select_q, update_state)
from .estimator import StreamingQIF
from .exceptions import (NumericalError, NumericalWarning, StreamQIFError,
                         ValidationError)
from .families import Batch, Family, link_inverse, mean_deriv, variance_fn
from .inference import (FitReport, confidence_intervals, covariance,
                        covariance_from_matrices, wald_tests)
from .offline import (CumulativeData, dense_extended_score,
                      independent_online_fit, offline_fit)
from .simulate import (MetricsRow, PanelData, SimDesign, compare_efficiency,
                       gaussian_benchmark_design, gen_linear, gen_logistic,
                       gen_poisson, logistic_benchmark_design,
                       poisson_benchmark_design, run_replicates)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BatchArrays",
    "CumulativeData",
    "EngineState",
    "Family",
    "FitReport",
    "MetricsRow",
    "NumericalError",
    "NumericalWarning",
    "PanelData",
    "SimDesign",
    "SolverConfig",
    "StreamQIFError",
    "StreamSession",
    "StreamingQIF",
    "SubjectSummary",
    "ValidationError",
    "compare_efficiency",
    "confidence_intervals",
    "covariance",
    "covariance_from_matrices",
    "default_q_candidates",
    "dense_extended_score",
    "gaussian_benchmark_design",
    "gen_linear",
    "gen_logistic",
    "gen_poisson",
    "independent_online_fit",
    "init_state",
    "link_inverse",
    "logistic_benchmark_design",
    "mean_deriv",
    "offline_fit",
    "poisson_benchmark_design",
    "run_replicates",
    "select_q",
    "update_state",
    "variance_fn",
    "wald_tests",
]
