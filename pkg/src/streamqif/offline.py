"""Dense reference implementations on cumulative data.

These routines materialize the full per-subject basis matrices and decay
weights over the whole observation history. They exist for initialization,
for oracle testing of the streaming engine (the blockwise and dense
evaluations must agree identically), and for efficiency comparisons; a
size guard keeps them away from production-scale streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._solver import ScoreEval, gauss_newton
from .exceptions import ValidationError
from .families import Batch, mean_deriv, resolve_family, validate_batch

# Largest cumulative per-subject length for which dense basis matrices may
# be materialized.
DENSE_GUARD = 5000


@dataclass(frozen=True)
class CumulativeData:
    """Ordered batch histories for a fixed set of subjects.

    Batch times are shared across subjects and must be non-decreasing;
    ties are allowed so that a batch may be split without changing any
    observation's decay weight.
    """

    batches: tuple          # per subject: tuple of Batch
    subject_ids: tuple
    times: tuple

    def __post_init__(self):
        if len(self.batches) != len(self.subject_ids):
            raise ValidationError("one batch history per subject required")
        if len(self.subject_ids) < 1:
            raise ValidationError("at least one subject required")
        b = len(self.times)
        if any(len(h) != b for h in self.batches):
            raise ValidationError("all subjects must have one batch per time")
        if b < 1:
            raise ValidationError("at least one batch required")
        t = np.asarray(self.times, dtype=np.float64)
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) < 0):
            raise ValidationError("batch times must be finite and non-decreasing")
        widths = {bt.X.shape[1] for h in self.batches for bt in h}
        if len(widths) != 1:
            raise ValidationError("design width must be constant across batches")

    @classmethod
    def from_mapping(cls, mapping, family="gaussian"):
        """Build from subject -> ordered list of Batch (sorted subject order)."""
        subject_ids = tuple(sorted(mapping, key=str))
        histories = []
        times = None
        for s in subject_ids:
            hist = tuple(validate_batch(b, family) for b in mapping[s])
            own_times = tuple(b.t for b in hist)
            if times is None:
                times = own_times
            elif own_times != times:
                raise ValidationError("subjects disagree on batch times")
            histories.append(hist)
        return cls(batches=tuple(histories), subject_ids=subject_ids, times=times)

    @classmethod
    def from_arrays(cls, X, y, times, subject_ids=None):
        """Build from stacked arrays X (m, b, n, p) and y (m, b, n)."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        m, b = X.shape[0], X.shape[1]
        if subject_ids is None:
            subject_ids = tuple(range(m))
        histories = tuple(
            tuple(Batch(X=X[i, j], y=y[i, j], t=float(times[j]),
                        subject_id=subject_ids[i], batch_index=j + 1)
                  for j in range(b))
            for i in range(m)
        )
        return cls(batches=histories, subject_ids=tuple(subject_ids),
                   times=tuple(float(t) for t in times))

    @property
    def m(self):
        return len(self.subject_ids)

    @property
    def p(self):
        return self.batches[0][0].X.shape[1]

    @property
    def n_total(self):
        return sum(b.X.shape[0] for b in self.batches[0])

    def truncated(self, n_batches):
        """The history restricted to the first ``n_batches`` batches."""
        return CumulativeData(
            batches=tuple(h[:n_batches] for h in self.batches),
            subject_ids=self.subject_ids,
            times=self.times[:n_batches],
        )


def _subject_dense(history, times, t_b, q, beta, family, s_count):
    """Dense score stack and gradient stack for one subject.

    Materializes the identity and off-diagonal basis matrices over the
    whole concatenated sequence and evaluates

        U_s = D^T A^{-1/2} M_s A^{-1/2} W r,
        S_s = D^T A^{-1/2} M_s A^{-1/2} W D,

    with W the diagonal of per-observation decay weights q^(t_b - t_j).
    """
    X = np.concatenate([b.X for b in history], axis=0)
    y = np.concatenate([b.y for b in history], axis=0)
    w_obs = np.concatenate([
        np.full(b.X.shape[0], q ** (t_b - tj))
        for b, tj in zip(history, times)
    ])
    N = X.shape[0]
    md = mean_deriv(X, beta, family)
    inv_sqrt_a = 1.0 / np.sqrt(md.a_diag)
    G = md.D * inv_sqrt_a[:, None]
    v = inv_sqrt_a * (w_obs * (y - md.mu))
    WG = w_obs[:, None] * G
    m1 = np.eye(N)
    u_parts = [G.T @ (m1 @ v)]
    s_parts = [G.T @ (m1 @ WG)]
    if s_count == 2:
        m2 = np.eye(N, k=1) + np.eye(N, k=-1)
        u_parts.append(G.T @ (m2 @ v))
        s_parts.append(G.T @ (m2 @ WG))
    return np.concatenate(u_parts), np.concatenate(s_parts, axis=0)


def _check_guard(data: CumulativeData):
    n_max = max(sum(b.X.shape[0] for b in h) for h in data.batches)
    if n_max > DENSE_GUARD:
        raise ValidationError(
            f"cumulative length {n_max} exceeds the dense guard {DENSE_GUARD}"
        )


def dense_scores_by_subject(data: CumulativeData, beta, q, family,
                            s_count=2, t_b=None):
    """Per-subject dense extended scores, shape (m, p * s_count)."""
    fam = resolve_family(family)
    _check_guard(data)
    beta = np.asarray(beta, dtype=np.float64)
    t_b = float(data.times[-1]) if t_b is None else float(t_b)
    rows = [
        _subject_dense(h, data.times, t_b, q, beta, fam, s_count)[0]
        for h in data.batches
    ]
    return np.stack(rows)


def dense_extended_score(data: CumulativeData, beta, q, family, s_count=2,
                         t_b=None):
    """Total dense extended score, shape (p * s_count,)."""
    return dense_scores_by_subject(data, beta, q, family, s_count,
                                   t_b=t_b).sum(axis=0)


def dense_extended_gradient(data: CumulativeData, beta, q, family, s_count=2,
                            t_b=None):
    """Total dense negative-gradient stack, shape (p * s_count, p)."""
    fam = resolve_family(family)
    _check_guard(data)
    beta = np.asarray(beta, dtype=np.float64)
    t_b = float(data.times[-1]) if t_b is None else float(t_b)
    total = None
    for h in data.batches:
        _, s = _subject_dense(h, data.times, t_b, q, beta, fam, s_count)
        total = s if total is None else total + s
    return total


@dataclass(frozen=True)
class OfflineFit:
    """Result of a dense fit on cumulative data."""

    beta: np.ndarray
    cov: np.ndarray
    u_total: np.ndarray
    s_total: np.ndarray
    v_total: np.ndarray
    n_iter: int
    residual_norm: float


def offline_fit(data: CumulativeData, q, family, s_count=2,
                config=None, beta0=None) -> OfflineFit:
    """Minimize the weighted quadratic inference function on cumulative data.

    The estimate is the Gauss-Newton root of S^T V^{-1} U with the dense
    score evaluation; the covariance is the inverse Godambe information.
    """
    from .engine import SolverConfig
    from .inference import covariance_from_matrices

    fam = resolve_family(family)
    _check_guard(data)
    if config is None:
        config = SolverConfig()
    t_b = float(data.times[-1])

    def evaluate(beta):
        rows = []
        s_sum = None
        for h in data.batches:
            u, s = _subject_dense(h, data.times, t_b, q, beta, fam, s_count)
            rows.append(u)
            s_sum = s if s_sum is None else s_sum + s
        return ScoreEval(u_i=np.stack(rows), s_total=s_sum)

    start = np.zeros(data.p) if beta0 is None else np.asarray(beta0, float)
    res = gauss_newton(evaluate, start, tol=config.tol,
                       max_iter=config.max_iter, ridge_eps=config.ridge_eps,
                       damping=config.damping)
    cov = covariance_from_matrices(res.s_total, res.v_total,
                                   ridge_eps=config.ridge_eps)
    return OfflineFit(beta=res.beta, cov=cov, u_total=res.u_total,
                      s_total=res.s_total, v_total=res.v_total,
                      n_iter=res.n_iter, residual_norm=res.residual_norm)


def independent_online_fit(data: CumulativeData, family, *, q=None,
                           candidates=None, config=None, level=0.95,
                           labels=None):
    """Stream the same data under a working-independence basis (identity only).

    Runs the identical streaming machinery restricted to one basis matrix,
    with the same per-batch decay selection when ``candidates`` is given.
    Used as the efficiency baseline.

    Returns:
        list of per-batch FitReport.
    """
    from .engine import SolverConfig, StreamSession

    session = StreamSession(family, s_count=1, q=q, candidates=candidates,
                            config=config or SolverConfig())
    reports = []
    for j in range(len(data.times)):
        mapping = {sid: data.batches[i][j]
                   for i, sid in enumerate(data.subject_ids)}
        session.push(mapping, data.times[j], subject_ids=data.subject_ids)
        reports.append(session.report(level=level, labels=labels))
    return reports
