"""Variance estimation, confidence intervals and Wald tests.

The estimator's covariance is the inverse Godambe information built from
the aggregated gradient and variability matrices, {S~^T V~^{-1} S~}^{-1}.
Intervals are two-sided Wald intervals on the normal scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from ._solver import spd_solve
from .exceptions import ValidationError


@dataclass(frozen=True)
class FitReport:
    """Per-batch coefficient table."""

    beta: np.ndarray
    cov: np.ndarray
    std_err: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    wald_z: np.ndarray
    p_values: np.ndarray
    q_used: float
    t_b: float
    n_iterations: int
    batch_index: int
    level: float
    labels: tuple

    def rows(self):
        """One dict per coefficient, in CSV column order."""
        out = []
        for k, name in enumerate(self.labels):
            out.append({
                "batch_index": self.batch_index,
                "t": self.t_b,
                "coefficient": name,
                "estimate": float(self.beta[k]),
                "std_err": float(self.std_err[k]),
                "ci_lower": float(self.ci_lower[k]),
                "ci_upper": float(self.ci_upper[k]),
                "z": float(self.wald_z[k]),
                "p_value": float(self.p_values[k]),
                "q_used": self.q_used,
            })
        return out


def normal_quantile(u):
    """Standard-normal quantile function."""
    return ndtri(u)


def normal_cdf(x):
    """Standard-normal distribution function."""
    return ndtr(x)


def covariance_from_matrices(s_total, v_total, *, ridge_eps=1e-8):
    """Invert the Godambe information S^T V^{-1} S, symmetrizing the result."""
    s_total = np.asarray(s_total, dtype=np.float64)
    v_total = np.asarray(v_total, dtype=np.float64)
    w_s, _ = spd_solve(v_total, s_total, ridge_eps, "sample variability")
    info = s_total.T @ w_s
    cov, _ = spd_solve(info, np.eye(info.shape[0]), ridge_eps, "information")
    return 0.5 * (cov + cov.T)


def covariance(state, *, ridge_eps=1e-8):
    """Covariance of the running estimate from a converged engine state."""
    return covariance_from_matrices(state.s_total, state.v_total,
                                    ridge_eps=ridge_eps)


def confidence_intervals(beta, cov, level=0.95):
    """Two-sided Wald intervals.

    Returns:
        (std_err, ci_lower, ci_upper)
    """
    if not 0.0 < level < 1.0:
        raise ValidationError("confidence level must lie in (0, 1)")
    beta = np.asarray(beta, dtype=np.float64)
    var = np.diag(np.asarray(cov, dtype=np.float64))
    if np.any(var < -1e-12):
        raise ValidationError("covariance has a negative diagonal entry")
    se = np.sqrt(np.maximum(var, 0.0))
    z = normal_quantile(0.5 * (1.0 + level))
    return se, beta - z * se, beta + z * se


def wald_tests(beta, std_err):
    """Two-sided Wald z statistics and p-values; zero std errors give inf z."""
    beta = np.asarray(beta, dtype=np.float64)
    se = np.asarray(std_err, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / np.where(se > 0, se, 1.0),
                     np.where(beta == 0.0, 0.0, np.inf * np.sign(beta)))
    p = 2.0 * normal_cdf(-np.abs(z))
    return z, p


def build_report(state, *, q_used, level=0.95, labels=None,
                 ridge_eps=1e-8) -> FitReport:
    """Assemble the coefficient table for a converged engine state."""
    cov = covariance(state, ridge_eps=ridge_eps)
    se, lo, hi = confidence_intervals(state.beta, cov, level)
    z, p = wald_tests(state.beta, se)
    if labels is None:
        labels = tuple(f"x{k + 1}" for k in range(state.p))
    else:
        labels = tuple(labels)
        if len(labels) != state.p:
            raise ValidationError(
                f"{len(labels)} labels supplied for {state.p} coefficients"
            )
    return FitReport(
        beta=state.beta.copy(), cov=cov, std_err=se, ci_lower=lo, ci_upper=hi,
        wald_z=z, p_values=p,
        q_used=float(q_used) if q_used is not None else float("nan"),
        t_b=state.t_prev, n_iterations=state.n_iter,
        batch_index=state.batch_count, level=level, labels=labels,
    )
