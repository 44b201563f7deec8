"""Canonical GLM families: link inverses, variance functions, mean derivatives.

Three canonical pairs are supported:

==========  =============  ==================  =================
name        link inverse   variance v(mu)      mean derivative
==========  =============  ==================  =================
gaussian    identity       1                   1
bernoulli   logistic       mu * (1 - mu)       mu * (1 - mu)
poisson     exp            mu                  mu
==========  =============  ==================  =================

For canonical links the mean derivative d mu / d eta equals the variance
function, so ``mean_deriv`` computes both from a single pass over the
linear predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
POISSON = "poisson"

FAMILIES = (GAUSSIAN, BERNOULLI, POISSON)

# Linear-predictor clamp for the logistic link. Keeps means strictly inside
# (0, 1) so the inverse square-root variance weights stay finite.
_LOGIT_ETA_MAX = 35.0

# Linear-predictor clamp for the log link. exp(700) is still finite in
# float64; beyond that the mean saturates instead of overflowing to inf.
_LOG_ETA_MAX = 700.0

# Variance floor for the Poisson family, applied where A^{-1/2} is formed.
_POISSON_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class Family:
    """A canonical GLM family identified by its ``kind`` string."""

    kind: str

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValidationError(
                f"unknown family {self.kind!r}; expected one of {FAMILIES}"
            )


@dataclass(frozen=True)
class Batch:
    """One subject-batch of longitudinal observations.

    Attributes:
        X: design matrix, shape (n_obs, p).
        y: outcome vector, shape (n_obs,).
        t: batch time (real scalar).
        subject_id: identifier of the subject the batch belongs to.
        batch_index: 1-based position of this batch in the stream.
    """

    X: np.ndarray
    y: np.ndarray
    t: float
    subject_id: object = None
    batch_index: int = 1


@dataclass(frozen=True)
class MeanDeriv:
    """Mean vector, variance diagonal and derivative matrix for one batch."""

    mu: np.ndarray
    a_diag: np.ndarray
    D: np.ndarray


def resolve_family(family) -> Family:
    """Accept a :class:`Family` or a kind string and return a Family."""
    if isinstance(family, Family):
        return family
    return Family(str(family))


def link_inverse(eta, family):
    """Evaluate the inverse link h(eta) elementwise.

    Saturates instead of overflowing: finite input never produces NaN.
    """
    kind = resolve_family(family).kind
    eta = np.asarray(eta, dtype=np.float64)
    if kind == GAUSSIAN:
        return eta + 0.0
    if kind == BERNOULLI:
        z = np.clip(eta, -_LOGIT_ETA_MAX, _LOGIT_ETA_MAX)
        return 1.0 / (1.0 + np.exp(-z))
    # poisson
    return np.exp(np.clip(eta, -_LOG_ETA_MAX, _LOG_ETA_MAX))


def variance_fn(mu, family):
    """Evaluate the variance function v(mu) elementwise.

    Raises:
        ValidationError: Bernoulli mean outside (0, 1).
    """
    kind = resolve_family(family).kind
    mu = np.asarray(mu, dtype=np.float64)
    if kind == GAUSSIAN:
        return np.ones_like(mu)
    if kind == BERNOULLI:
        if np.any(mu <= 0.0) or np.any(mu >= 1.0):
            raise ValidationError("Bernoulli mean must lie strictly in (0, 1)")
        return mu * (1.0 - mu)
    # poisson
    if np.any(mu < 0.0):
        raise ValidationError("Poisson mean must be nonnegative")
    return np.maximum(mu, _POISSON_VAR_FLOOR)


def mean_deriv(X, beta, family) -> MeanDeriv:
    """Means, variance diagonal and derivative matrix D = d mu / d beta.

    Works on any leading shape: ``X`` with shape (..., n, p) yields
    ``mu``/``a_diag`` of shape (..., n) and ``D`` of shape (..., n, p).
    For the gaussian family ``D`` equals ``X`` exactly.
    """
    fam = resolve_family(family)
    X = np.asarray(X, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    eta = X @ beta
    if not np.all(np.isfinite(eta)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(eta)))[0]
        raise ValidationError(
            f"non-finite linear predictor at row index {tuple(bad)}"
        )
    mu, a_diag, dmu = _mean_var_deriv(eta, fam.kind)
    if fam.kind == GAUSSIAN:
        D = X + 0.0
    else:
        D = dmu[..., None] * X
    return MeanDeriv(mu=mu, a_diag=a_diag, D=D)


def _mean_var_deriv(eta, kind):
    """Shared kernel: (mu, variance, d mu/d eta) from the linear predictor."""
    if kind == GAUSSIAN:
        mu = eta + 0.0
        ones = np.ones_like(mu)
        return mu, ones, ones
    if kind == BERNOULLI:
        z = np.clip(eta, -_LOGIT_ETA_MAX, _LOGIT_ETA_MAX)
        mu = 1.0 / (1.0 + np.exp(-z))
        a = mu * (1.0 - mu)
        return mu, a, a
    # poisson
    mu = np.exp(np.clip(eta, -_LOG_ETA_MAX, _LOG_ETA_MAX))
    a = np.maximum(mu, _POISSON_VAR_FLOOR)
    return mu, a, mu


def validate_outcomes(y, family, *, where="y"):
    """Check outcome values against the family's support.

    Raises:
        ValidationError: naming the first offending position.
    """
    kind = resolve_family(family).kind
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(y)))[0]
        raise ValidationError(f"non-finite outcome in {where} at {tuple(bad)}")
    if kind == BERNOULLI:
        ok = (y == 0.0) | (y == 1.0)
        if not np.all(ok):
            bad = np.argwhere(~np.atleast_1d(ok))[0]
            raise ValidationError(
                f"bernoulli outcome must be 0 or 1; violated in {where} at {tuple(bad)}"
            )
    elif kind == POISSON:
        ok = (y >= 0.0) & (y == np.floor(y))
        if not np.all(ok):
            bad = np.argwhere(~np.atleast_1d(ok))[0]
            raise ValidationError(
                f"poisson outcome must be a nonnegative integer; "
                f"violated in {where} at {tuple(bad)}"
            )


def validate_batch(batch: Batch, family) -> Batch:
    """Validate a single subject-batch against its structural contract."""
    X = np.asarray(batch.X, dtype=np.float64)
    y = np.asarray(batch.y, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("batch design matrix must be 2-dimensional")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValidationError(
            f"batch outcome length {y.shape} does not match design rows {X.shape}"
        )
    if X.shape[0] < 1:
        raise ValidationError("batch must contain at least one observation")
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise ValidationError(f"non-finite design entry at row {bad[0]}, col {bad[1]}")
    validate_outcomes(y, family)
    if not np.isfinite(batch.t):
        raise ValidationError("batch time must be finite")
    return Batch(X=X, y=y, t=float(batch.t), subject_id=batch.subject_id,
                 batch_index=int(batch.batch_index))
