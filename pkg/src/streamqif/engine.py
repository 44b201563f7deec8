"""Streaming estimation engine.

State per subject is a carried score vector, a carried negative-gradient
matrix and the final observation of the most recently absorbed batch.
When a new batch arrives the engine solves the incremental estimating
equation S~^T V~^{-1} U~ = 0 by Gauss-Newton, where at candidate beta

    U~_i = q^dt * [u_carried + s_carried (beta_prev - beta)]
           + stack(U1(beta), U2(beta) + U_fwd(beta) + q^dt * U_bwd(beta))
    S~_i = q^dt * s_carried
           + stack(S1(beta), S2(beta) + S_fwd(beta) + q^dt * S_bwd(beta))

with dt the time elapsed since the previous batch and q in (0, 1) the
exponential decay base. U1/S1 are the identity-basis blocks of the new
batch, U2/S2 the off-diagonal-basis blocks, and the fwd/bwd terms are the
rank-one cross blocks linking the stored last observation to the new
batch's first observation. All aggregates are rebuilt at every iterate.
On convergence the summaries are frozen at the solution, the stored last
observation is replaced, and the raw batch is discarded: state size and
update cost are independent of how many batches have been absorbed.

The decay parameter can be fixed or selected per batch from a candidate
set; each candidate then maintains its own summary bundle from the first
batch onward, and the candidate minimizing the quadratic form of the
current batch's own score wins.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._solver import ScoreEval, gauss_newton, spd_solve
from .blocks import neighbor_sum
from .exceptions import NumericalError, NumericalWarning, ValidationError
from .families import (GAUSSIAN, _mean_var_deriv, resolve_family,
                       validate_batch, validate_outcomes)


@dataclass(frozen=True)
class SolverConfig:
    """Newton solve controls.

    ``tol`` bounds the max-abs entry of the estimating function at the
    returned estimate. ``ridge_eps`` scales the diagonal ridge applied
    when a factorization fails. ``check_information`` enables the
    positive-definiteness diagnostic on the cross-batch information
    matrix (a warning, never an error).
    """

    tol: float = 1e-8
    max_iter: int = 100
    ridge_eps: float = 1e-8
    damping: float = 1.0
    check_information: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValidationError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class SubjectSummary:
    """Carried state for one subject: score, gradient, last observation."""

    u_tilde: np.ndarray
    s_tilde: np.ndarray
    last_x: np.ndarray
    last_y: float


@dataclass(frozen=True)
class BatchArrays:
    """Stacked per-subject batches: X (m, n, p), y (m, n), all subjects
    sharing the batch size n."""

    X: np.ndarray
    y: np.ndarray

    @classmethod
    def from_mapping(cls, batches, subject_ids, family):
        """Stack a subject -> Batch mapping in the given subject order."""
        missing = [s for s in subject_ids if s not in batches]
        if missing:
            raise ValidationError(f"batch missing for subjects {missing!r}")
        extra = set(batches) - set(subject_ids)
        if extra:
            raise ValidationError(
                f"unknown subjects in batch: {sorted(map(str, extra))}"
            )
        checked = [validate_batch(batches[s], family) for s in subject_ids]
        sizes = {b.X.shape[0] for b in checked}
        if len(sizes) != 1:
            raise ValidationError("all subjects must share the batch size")
        widths = {b.X.shape[1] for b in checked}
        if len(widths) != 1:
            raise ValidationError("all subjects must share the design width")
        times = {b.t for b in checked}
        if len(times) != 1:
            raise ValidationError("all subject batches must share the batch time")
        X = np.stack([b.X for b in checked])
        y = np.stack([b.y for b in checked])
        return cls(X=X, y=y)


@dataclass(frozen=True)
class EngineState:
    """Frozen engine state after absorbing ``batch_count`` batches."""

    family: str
    p: int
    s_count: int
    subject_ids: tuple
    beta: np.ndarray           # (p,)
    t_prev: float
    batch_count: int
    u_tilde: np.ndarray        # (m, d) carried per-subject scores
    s_tilde: np.ndarray        # (m, d, p) carried per-subject gradients
    last_x: np.ndarray         # (m, p)
    last_y: np.ndarray         # (m,)
    u_total: np.ndarray        # (d,)
    s_total: np.ndarray        # (d, p)
    v_total: np.ndarray        # (d, d)
    n_obs: int                 # per-subject observations absorbed so far
    n_iter: int
    residual_norm: float
    last_batch_scores: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self):
        return len(self.subject_ids)

    @property
    def score_dim(self):
        return self.p * self.s_count

    def subject_summary(self, subject_id) -> SubjectSummary:
        i = self.subject_ids.index(subject_id)
        return SubjectSummary(
            u_tilde=self.u_tilde[i].copy(),
            s_tilde=self.s_tilde[i].copy(),
            last_x=self.last_x[i].copy(),
            last_y=float(self.last_y[i]),
        )


def default_q_candidates(n_batches, a_min=0.1, a_max=1.0, count=20):
    """Decay candidates q = exp(-a * n_batches^0.3) over an even grid of a."""
    if n_batches < 1:
        raise ValidationError("n_batches must be at least 1")
    if not (0 < a_min <= a_max):
        raise ValidationError("need 0 < a_min <= a_max")
    a = np.linspace(a_min, a_max, int(count))
    return tuple(float(v) for v in np.exp(-a * float(n_batches) ** 0.3))


def _as_arrays(batches, subject_ids, family):
    if isinstance(batches, BatchArrays):
        X = np.asarray(batches.X, dtype=np.float64)
        y = np.asarray(batches.y, dtype=np.float64)
        if X.ndim != 3 or y.ndim != 2 or X.shape[:2] != y.shape:
            raise ValidationError(
                f"stacked batch shapes inconsistent: X {X.shape}, y {y.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise ValidationError("non-finite design entry in stacked batch")
        validate_outcomes(y, family)
        return BatchArrays(X=X, y=y)
    return BatchArrays.from_mapping(batches, subject_ids, family)


def _vec_blocks(G, e):
    """Per-subject G^T e, shape (m, p), as one batched matmul."""
    return np.matmul(e[:, None, :], G)[:, 0, :]


def _score_pieces(G, Gt, e, s_count, cross, w):
    """New-batch score stack from weighted design/residual pieces.

    ``cross`` is None at initialization, otherwise (e_last, g_last),
    the weighted residual and design row of the stored last observation.
    Returns (new_u, s_parts) where s_parts is the tuple of gradient
    blocks (not yet stacked) or None when ``Gt`` is None.
    """
    u1 = _vec_blocks(G, e)
    s1 = None if Gt is None else np.matmul(Gt, G)
    if s_count == 1:
        return u1, (s1,)
    u2 = _vec_blocks(G, neighbor_sum(e, axis=-1))
    s2 = None if Gt is None else np.matmul(Gt, neighbor_sum(G, axis=-2))
    if cross is not None:
        e_last, g_last = cross
        e_first, g_first = e[:, 0], G[:, 0]
        u2 = u2 + g_last * e_first[:, None] + w * (g_first * e_last[:, None])
        if Gt is not None:
            s_fwd = g_last[:, :, None] * g_first[:, None, :]
            s2 = s2 + s_fwd + w * np.swapaxes(s_fwd, 1, 2)
    return np.concatenate([u1, u2], axis=1), (s1, s2)


def _make_evaluator(X, y, fam_kind, s_count, carried=None):
    """Build the per-iterate score evaluation closure.

    ``carried`` is None at initialization; for updates it is the tuple
    (beta_prev, u_carried, s_carried, last_x, last_y, decay) and the
    stored last observation is prepended to the batch so means, variances
    and derivative rows for the cross terms come out of the same kernel
    pass as the within-batch blocks.

    For the gaussian family the weighted design equals the raw design at
    every iterate, so all gradient blocks are constant and are computed
    once here instead of per iterate.
    """
    has_cross = carried is not None and s_count == 2
    if carried is not None:
        beta_prev, u_prev, s_prev, last_x, last_y, w = carried
    else:
        w = 0.0
    if has_cross:
        Xa = np.concatenate([last_x[:, None, :], X], axis=1)
        ya = np.concatenate([last_y[:, None], y], axis=1)
    else:
        Xa, ya = X, y

    if fam_kind == GAUSSIAN:
        G = Xa[:, 1:] if has_cross else Xa
        Gt = G.transpose(0, 2, 1)
        _, s_parts = _score_pieces(
            G, Gt, np.zeros(G.shape[:2]), s_count,
            (np.zeros(G.shape[0]), Xa[:, 0]) if has_cross else None, w)
        new_s = s_parts[0] if s_count == 1 \
            else np.concatenate(s_parts, axis=1)
        if carried is not None:
            s_i_const = w * s_prev + new_s
        else:
            s_i_const = new_s
        s_total_const = s_i_const.sum(axis=0)

        def evaluate(beta):
            e_all = ya - Xa @ beta
            cross = (e_all[:, 0], Xa[:, 0]) if has_cross else None
            e = e_all[:, 1:] if has_cross else e_all
            new_u, _ = _score_pieces(G, None, e, s_count, cross, w)
            if carried is None:
                return ScoreEval(u_i=new_u, s_i=s_i_const,
                                 s_total=s_total_const, batch_u=new_u)
            u_i = w * (u_prev + s_prev @ (beta_prev - beta)) + new_u
            return ScoreEval(u_i=u_i, s_i=s_i_const,
                             s_total=s_total_const, batch_u=new_u)

        return evaluate

    def evaluate(beta):
        eta = Xa @ beta
        mu, a, dmu = _mean_var_deriv(eta, fam_kind)
        inv_sqrt_a = 1.0 / np.sqrt(a)
        e_all = (ya - mu) * inv_sqrt_a
        G_all = Xa * (dmu * inv_sqrt_a)[..., None]
        cross = (e_all[:, 0], G_all[:, 0]) if has_cross else None
        e = e_all[:, 1:] if has_cross else e_all
        G = G_all[:, 1:] if has_cross else G_all
        new_u, s_parts = _score_pieces(G, G.transpose(0, 2, 1), e,
                                       s_count, cross, w)
        new_s = s_parts[0] if s_count == 1 \
            else np.concatenate(s_parts, axis=1)
        if carried is None:
            return ScoreEval(u_i=new_u, s_i=new_s, batch_u=new_u)
        u_i = w * (u_prev + s_prev @ (beta_prev - beta)) + new_u
        s_i = w * s_prev + new_s
        return ScoreEval(u_i=u_i, s_i=s_i, batch_u=new_u)

    return evaluate


def init_state(batches, t1, family, *, s_count=2, config=SolverConfig(),
               subject_ids=None) -> EngineState:
    """Initialize the stream from the first batch.

    The starting estimate is the offline quadratic inference function
    estimator on the first batch alone (no cross-batch terms exist yet);
    per-subject summaries are frozen at that estimate.
    """
    fam = resolve_family(family)
    if subject_ids is None:
        if isinstance(batches, BatchArrays):
            raise ValidationError("subject_ids required with pre-stacked batches")
        subject_ids = tuple(sorted(batches, key=str))
    else:
        subject_ids = tuple(subject_ids)
    if len(subject_ids) < 1:
        raise ValidationError("at least one subject required")
    arr = _as_arrays(batches, subject_ids, fam)
    m, n, p = arr.X.shape
    if m != len(subject_ids):
        raise ValidationError(
            f"{m} stacked batches for {len(subject_ids)} subjects"
        )
    if s_count not in (1, 2):
        raise ValidationError("s_count must be 1 or 2")

    from .offline import CumulativeData, offline_fit

    data = CumulativeData.from_arrays(arr.X[:, None], arr.y[:, None],
                                      times=(float(t1),),
                                      subject_ids=subject_ids)
    fit = offline_fit(data, q=0.5, family=fam, s_count=s_count, config=config)
    beta = fit.beta

    ev = _make_evaluator(arr.X, arr.y, fam.kind, s_count)(beta)
    return EngineState(
        family=fam.kind, p=p, s_count=s_count, subject_ids=subject_ids,
        beta=beta, t_prev=float(t1), batch_count=1,
        u_tilde=ev.u_i, s_tilde=ev.s_i,
        last_x=arr.X[:, -1, :].copy(), last_y=arr.y[:, -1].copy(),
        u_total=ev.u_i.sum(axis=0), s_total=ev.s_i.sum(axis=0),
        v_total=ev.u_i.T @ ev.u_i,
        n_obs=n, n_iter=fit.n_iter, residual_norm=fit.residual_norm,
        last_batch_scores=ev.u_i,
    )


def update_state(state: EngineState, batches, t_b, q, *,
                 config=SolverConfig()) -> EngineState:
    """Absorb one new batch at time ``t_b`` and return the updated state."""
    fam = resolve_family(state.family)
    t_b = float(t_b)
    if not np.isfinite(t_b) or t_b <= state.t_prev:
        raise ValidationError(
            f"batch time {t_b} must exceed the previous time {state.t_prev}"
        )
    if not 0.0 < q < 1.0:
        raise ValidationError("decay parameter q must lie in (0, 1)")
    arr = _as_arrays(batches, state.subject_ids, fam)
    m, n, p = arr.X.shape
    if m != state.m or p != state.p:
        raise ValidationError(
            f"batch shape ({m} subjects, width {p}) does not match the "
            f"state ({state.m} subjects, width {state.p})"
        )
    w = q ** (t_b - state.t_prev)
    carried = (state.beta, state.u_tilde, state.s_tilde,
               state.last_x, state.last_y, w)
    evaluate = _make_evaluator(arr.X, arr.y, fam.kind, state.s_count,
                               carried=carried)
    res = gauss_newton(evaluate, state.beta, tol=config.tol,
                       max_iter=config.max_iter, ridge_eps=config.ridge_eps,
                       damping=config.damping)
    new_state = EngineState(
        family=fam.kind, p=p, s_count=state.s_count,
        subject_ids=state.subject_ids,
        beta=res.beta, t_prev=t_b, batch_count=state.batch_count + 1,
        u_tilde=res.eval.u_i, s_tilde=res.eval.s_i,
        last_x=arr.X[:, -1, :].copy(), last_y=arr.y[:, -1].copy(),
        u_total=res.u_total, s_total=res.s_total, v_total=res.v_total,
        n_obs=state.n_obs + n, n_iter=res.n_iter,
        residual_norm=res.residual_norm,
        last_batch_scores=res.eval.batch_u,
    )
    if config.check_information:
        check_information_matrix(new_state.s_total, new_state.v_total,
                                 state.s_total, new_state.n_obs,
                                 ridge_eps=config.ridge_eps)
    return new_state


def check_information_matrix(s_total, v_total, s_total_prev, n_obs,
                             *, ridge_eps=1e-8):
    """Warn when the cross-batch information matrix is not positive definite.

    The matrix S~_b^T V~_b^{-1} S~_{b-1} / N_b approximates the inverse
    covariance of the running estimate; losing positive-definiteness
    signals that inference at this batch may be unreliable.
    """
    w_s, _ = spd_solve(v_total, s_total_prev, ridge_eps, "sample variability")
    h = (s_total.T @ w_s) / float(n_obs)
    sym = 0.5 * (h + h.T)
    min_eig = float(np.min(np.linalg.eigvalsh(sym)))
    if min_eig <= 0.0:
        warnings.warn(
            "cross-batch information matrix is not positive definite "
            f"(min eigenvalue {min_eig:.3e})",
            NumericalWarning,
            stacklevel=2,
        )
    return min_eig


def batch_score_criterion(state: EngineState, *, ridge_eps=1e-8):
    """Quadratic form of the current batch's own score at the new estimate."""
    scores = state.last_batch_scores
    if scores is None:
        raise ValidationError("state carries no current-batch scores")
    u = scores.sum(axis=0)
    v = scores.T @ scores
    w_u, _ = spd_solve(v, u, ridge_eps, "batch variability")
    return float(u @ w_u)


def select_q(states, batches, t_b, *, config=SolverConfig()):
    """Advance every candidate bundle and pick the decay parameter whose
    current-batch score contribution is smallest.

    Args:
        states: mapping q -> EngineState, one bundle per candidate.

    Returns:
        (q_opt, advanced_states): the winning candidate and the advanced
        bundles. Candidates whose update fails are dropped with a warning;
        an empty survivor set raises :class:`NumericalError`.
    """
    if not states:
        raise ValidationError("no candidate bundles supplied")
    arr = None
    advanced = {}
    criteria = {}
    for q, st in states.items():
        if arr is None:
            arr = _as_arrays(batches, st.subject_ids, st.family)
        try:
            new_st = update_state(st, arr, t_b, q, config=config)
            criteria[q] = batch_score_criterion(new_st,
                                                ridge_eps=config.ridge_eps)
            advanced[q] = new_st
        except NumericalError as exc:
            warnings.warn(
                f"dropping decay candidate q={q:.6g}: {exc}",
                NumericalWarning,
                stacklevel=2,
            )
    if not advanced:
        raise NumericalError("all decay candidates failed to update")
    q_opt = min(criteria, key=criteria.get)
    return q_opt, advanced


class StreamSession:
    """Drives a stream end to end, in fixed or adaptive decay mode.

    Fixed mode carries a single state bundle; adaptive mode carries one
    bundle per candidate and arbitrates per batch, reporting the winner.
    """

    def __init__(self, family, *, s_count=2, q=None, candidates=None,
                 config=SolverConfig()):
        if (q is None) == (candidates is None):
            raise ValidationError("specify exactly one of q or candidates")
        if q is not None and not 0.0 < q < 1.0:
            raise ValidationError("decay parameter q must lie in (0, 1)")
        self.family = resolve_family(family).kind
        self.s_count = int(s_count)
        self.config = config
        self.q = float(q) if q is not None else None
        self.candidates = tuple(float(c) for c in candidates) if candidates \
            else None
        if self.candidates is not None:
            bad = [c for c in self.candidates if not 0.0 < c < 1.0]
            if bad:
                raise ValidationError(f"candidates outside (0, 1): {bad}")
            if len(set(self.candidates)) != len(self.candidates):
                raise ValidationError("duplicate decay candidates")
        self.states = None
        self.q_used = None

    @property
    def mode(self):
        return "fixed" if self.q is not None else "adaptive"

    @property
    def started(self):
        return self.states is not None

    @property
    def state(self) -> EngineState:
        """The reporting bundle: the fixed bundle, or the latest winner."""
        if not self.started:
            raise ValidationError("session not started")
        if self.mode == "fixed":
            return self.states[self.q]
        key = self.q_used if self.q_used is not None else next(iter(self.states))
        return self.states[key]

    def start(self, batches, t, subject_ids=None):
        """Initialize every bundle from the first batch (decay-free)."""
        if self.started:
            raise ValidationError("session already started")
        st = init_state(batches, t, self.family, s_count=self.s_count,
                        config=self.config, subject_ids=subject_ids)
        if self.mode == "fixed":
            self.states = {self.q: st}
            self.q_used = self.q
        else:
            self.states = {c: st for c in self.candidates}
            self.q_used = None
        return self

    def step(self, batches, t):
        """Absorb one batch: update (fixed) or update-and-select (adaptive)."""
        if not self.started:
            raise ValidationError("session not started")
        if self.mode == "fixed":
            st = update_state(self.states[self.q], batches, t,
                              self.q, config=self.config)
            self.states = {self.q: st}
            self.q_used = self.q
        else:
            q_opt, advanced = select_q(self.states, batches, t,
                                       config=self.config)
            self.states = advanced
            self.q_used = q_opt
        return self

    def push(self, batches, t, subject_ids=None):
        """start() on the first call, step() afterwards."""
        if not self.started:
            return self.start(batches, t, subject_ids=subject_ids)
        return self.step(batches, t)

    def report(self, level=0.95, labels=None):
        """Coefficient table for the reporting bundle at the latest batch."""
        from .inference import build_report

        return build_report(self.state, q_used=self.q_used, level=level,
                            labels=labels, ridge_eps=self.config.ridge_eps)
