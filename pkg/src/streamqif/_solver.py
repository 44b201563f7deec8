"""Gauss-Newton root finder for over-identified estimating equations.

Solves S(beta)^T V(beta)^{-1} U(beta) = 0 where U is a stacked score of
dimension d >= p, S its negative-gradient stack and V the sample outer
product of per-subject scores, all three rebuilt at every iterate. The
caller supplies an ``evaluate`` closure producing per-subject pieces at a
candidate beta; everything in here is deterministic: fixed reduction
order, no randomness.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import NumericalError, NumericalWarning

# Most halvings tolerated while backtracking out of a non-finite step.
_MAX_HALVINGS = 60

# Successive iterations without meaningful residual improvement before the
# iteration is declared stalled and handed to the fallback root solver.
_STALL_LIMIT = 15


@dataclass
class ScoreEval:
    """Per-subject scores and gradients at one candidate beta.

    Attributes:
        u_i: per-subject stacked scores, shape (m, d).
        s_i: per-subject stacked negative gradients, shape (m, d, p);
            may be None when only the total is available.
        s_total: aggregated negative gradient, shape (d, p); derived from
            ``s_i`` when omitted.
        batch_u: optional payload carried through to the result (used for
            current-batch-only scores).
    """

    u_i: np.ndarray
    s_i: np.ndarray | None = None
    s_total: np.ndarray | None = None
    batch_u: np.ndarray | None = None

    def total_gradient(self):
        if self.s_total is not None:
            return self.s_total
        return self.s_i.sum(axis=0)

    def is_finite(self):
        ok = np.all(np.isfinite(self.u_i))
        if ok and self.s_i is not None:
            ok = np.all(np.isfinite(self.s_i))
        if ok and self.s_total is not None:
            ok = np.all(np.isfinite(self.s_total))
        return bool(ok)


@dataclass
class SolveResult:
    beta: np.ndarray
    eval: ScoreEval
    u_total: np.ndarray
    s_total: np.ndarray
    v_total: np.ndarray
    n_iter: int
    residual_norm: float
    ridge_used: bool


def _factor_spd(mat, ridge_eps, label):
    """Cholesky-factor a symmetric matrix with one ridge retry.

    On failure the matrix is regularized by ridge_eps * mean(diag) * I
    (falling back to ridge_eps when the diagonal is zero) and a
    :class:`NumericalWarning` is emitted.

    Returns:
        (factorization, ridged_flag)
    """
    try:
        return cho_factor(mat, lower=True, check_finite=False), False
    except LinAlgError:
        pass
    mean_diag = float(np.mean(np.diag(mat)))
    lam = ridge_eps * (mean_diag if mean_diag > 0 else 1.0)
    warnings.warn(
        f"{label} matrix singular; applying ridge regularization",
        NumericalWarning,
        stacklevel=3,
    )
    ridged = mat + lam * np.eye(mat.shape[0])
    try:
        return cho_factor(ridged, lower=True, check_finite=False), True
    except LinAlgError as exc:
        raise NumericalError(
            f"{label} matrix not positive definite even after ridge"
        ) from exc


def spd_solve(mat, rhs, ridge_eps, label):
    """Solve a symmetric positive (semi)definite system, ridging on failure.

    Returns:
        (solution, ridged_flag)
    """
    fac, ridged = _factor_spd(np.asarray(mat, dtype=np.float64),
                              ridge_eps, label)
    return cho_solve(fac, np.asarray(rhs, dtype=np.float64),
                     check_finite=False), ridged


def gauss_newton(evaluate, beta0, *, tol, max_iter, ridge_eps, damping=1.0):
    """Iterate Gauss-Newton steps until the estimating function is null.

    Args:
        evaluate: callable beta -> :class:`ScoreEval`.
        beta0: starting point, shape (p,).
        tol: convergence threshold on the max-abs entry of
            S^T V^{-1} U at the current iterate.
        max_iter: maximum number of Newton steps.
        ridge_eps: relative ridge applied when a factorization fails.
        damping: initial step scale; halved while the step lands on
            non-finite score blocks.

    Returns:
        :class:`SolveResult` with all aggregates frozen at the converged
        beta.

    Raises:
        NumericalError: no convergence within ``max_iter`` steps (carries
            the best iterate and its residual norm), or an unrecoverable
            factorization failure.
    """
    beta = np.asarray(beta0, dtype=np.float64).copy()
    ev = evaluate(beta)
    if not ev.is_finite():
        raise NumericalError("score blocks non-finite at the starting point",
                             beta=beta)
    ridge_used = False
    best_norm, best_beta = np.inf, beta
    n_steps = 0
    stalled = 0
    for _ in range(max_iter + 1):
        u_total = ev.u_i.sum(axis=0)
        s_total = ev.total_gradient()
        v_total = ev.u_i.T @ ev.u_i
        fac, ridged = _factor_spd(v_total, ridge_eps, "sample variability")
        ridge_used = ridge_used or ridged
        # One factorization serves both V^{-1} U and V^{-1} S.
        solved = cho_solve(fac, np.concatenate([u_total[:, None], s_total],
                                               axis=1), check_finite=False)
        w_u, w_s = solved[:, 0], solved[:, 1:]
        resid = s_total.T @ w_u
        resid_norm = float(np.max(np.abs(resid)))
        if resid_norm < best_norm * (1.0 - 1e-3):
            stalled = 0
        else:
            stalled += 1
        if resid_norm < best_norm:
            best_norm, best_beta = resid_norm, beta
        if resid_norm < tol:
            return SolveResult(
                beta=beta, eval=ev, u_total=u_total, s_total=s_total,
                v_total=v_total, n_iter=n_steps, residual_norm=resid_norm,
                ridge_used=ridge_used,
            )
        # The plain iteration can orbit the root when the sample is small
        # (the neglected derivative of the variability matrix is large);
        # hand such cases to the safeguarded root solver early.
        if n_steps >= max_iter or stalled > _STALL_LIMIT:
            break
        normal_mat = s_total.T @ w_s
        fac2, ridged2 = _factor_spd(normal_mat, ridge_eps, "normal")
        ridge_used = ridge_used or ridged2
        step = cho_solve(fac2, resid, check_finite=False)
        if not np.all(np.isfinite(step)):
            raise NumericalError("non-finite Newton step", beta=beta,
                                 residual_norm=resid_norm, n_iter=n_steps)
        scale = damping
        for _ in range(_MAX_HALVINGS):
            beta_new = beta + scale * step
            ev_new = evaluate(beta_new)
            if ev_new.is_finite():
                break
            scale *= 0.5
        else:
            raise NumericalError(
                "step produces non-finite score blocks even after damping",
                beta=beta, residual_norm=resid_norm, n_iter=n_steps,
            )
        beta, ev = beta_new, ev_new
        n_steps += 1
    return _fallback_root(evaluate, best_beta, tol=tol, ridge_eps=ridge_eps,
                          n_steps=n_steps, best_norm=best_norm,
                          ridge_used=ridge_used, max_iter=max_iter)


def _fallback_root(evaluate, beta0, *, tol, ridge_eps, n_steps, best_norm,
                   ridge_used, max_iter):
    """Solve the same estimating equation with a safeguarded root finder.

    The equation S^T V^{-1} U = 0 (with everything evaluated at the same
    beta) is unchanged; only the search strategy differs. MINPACK's hybrid
    method is deterministic and handles the small-sample cases where the
    plain iteration cycles.
    """
    from scipy.optimize import root

    def estimating_fn(beta):
        ev = evaluate(beta)
        if not ev.is_finite():
            # Push the solver back toward the feasible region.
            return np.full(beta.shape, 1e30)
        u_total = ev.u_i.sum(axis=0)
        s_total = ev.total_gradient()
        v_total = ev.u_i.T @ ev.u_i
        w_u, _ = spd_solve(v_total, u_total, ridge_eps, "sample variability")
        return s_total.T @ w_u

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalWarning)
        sol = root(estimating_fn, beta0, method="hybr",
                   options={"xtol": 1e-13, "maxfev": 200 * (len(beta0) + 2)})
    beta = np.asarray(sol.x, dtype=np.float64)
    ev = evaluate(beta)
    if ev.is_finite():
        u_total = ev.u_i.sum(axis=0)
        s_total = ev.total_gradient()
        v_total = ev.u_i.T @ ev.u_i
        fac, ridged = _factor_spd(v_total, ridge_eps, "sample variability")
        w_u = cho_solve(fac, u_total, check_finite=False)
        resid_norm = float(np.max(np.abs(s_total.T @ w_u)))
        if resid_norm < tol:
            return SolveResult(
                beta=beta, eval=ev, u_total=u_total, s_total=s_total,
                v_total=v_total, n_iter=n_steps + int(sol.nfev),
                residual_norm=resid_norm, ridge_used=ridge_used or ridged,
            )
        if resid_norm < best_norm:
            best_norm = resid_norm
    raise NumericalError(
        f"no convergence in {max_iter} iterations "
        f"(best residual {best_norm:.3e})",
        beta=beta0, residual_norm=best_norm, n_iter=n_steps,
    )
