"""Score and gradient blocks of the extended quadratic-inference-function score.

The AR(1) basis expansion uses two basis matrices: the identity, and the
matrix with ones on the two main off-diagonals. Over a partition of the
observation sequence into batches, the off-diagonal basis contributes

* a within-batch block per batch (the off-diagonal stencil restricted to
  the batch), and
* a pair of rank-one cross-batch blocks linking the last observation of
  one batch to the first observation of the next.

The off-diagonal basis is never materialized here: applying it to a vector
is the neighbor sum ``v[k-1] + v[k+1]``, which keeps per-batch cost at
O(n * p). All functions accept stacked leading dimensions so a whole
subject panel can be evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .families import mean_deriv, resolve_family

__all__ = [
    "BasisSet",
    "within_batch_blocks",
    "cross_batch_blocks",
    "stack_extended",
    "stack_gradient",
    "split_extended",
    "accumulated_score",
]


@dataclass(frozen=True)
class BasisSet:
    """Working-correlation basis count: 1 = identity only (independence
    working), 2 = identity plus the AR(1) off-diagonal basis."""

    s_count: int = 2

    def __post_init__(self):
        if self.s_count not in (1, 2):
            raise ValidationError("basis count must be 1 or 2")


def neighbor_sum(v, axis=-1):
    """Apply the off-diagonal-ones basis as a stencil: out_k = v_{k-1} + v_{k+1}."""
    v = np.asarray(v)
    out = np.zeros_like(v)
    lo = [slice(None)] * v.ndim
    hi = [slice(None)] * v.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    lo, hi = tuple(lo), tuple(hi)
    out[lo] += v[hi]
    out[hi] += v[lo]
    return out


def _within_core(G, e):
    """Blocks from the weighted design G = A^{-1/2} D and residual e = A^{-1/2} r.

    Returns (u1, u2, s1, s2) with shapes (..., p), (..., p), (..., p, p),
    (..., p, p); u2/s2 use the off-diagonal stencil.
    """
    u1 = np.einsum("...np,...n->...p", G, e)
    s1 = np.einsum("...np,...nq->...pq", G, G)
    e2 = neighbor_sum(e, axis=-1)
    G2 = neighbor_sum(G, axis=-2)
    u2 = np.einsum("...np,...n->...p", G, e2)
    s2 = np.einsum("...np,...nq->...pq", G, G2)
    return u1, u2, s1, s2


def _weighted_design(X, y, beta, family):
    """Compute G = A^{-1/2} D and e = A^{-1/2} (y - mu) plus raw pieces."""
    md = mean_deriv(X, beta, family)
    inv_sqrt_a = 1.0 / np.sqrt(md.a_diag)
    e = (np.asarray(y, dtype=np.float64) - md.mu) * inv_sqrt_a
    G = md.D * inv_sqrt_a[..., None]
    return md, G, e


def batched_within_blocks(X, y, beta, family):
    """Within-batch blocks for stacked batches.

    Args:
        X: shape (..., n, p) stacked design matrices.
        y: shape (..., n) stacked outcomes.

    Returns:
        (u1, u2, s1, s2) with leading shape preserved.
    """
    _, G, e = _weighted_design(X, y, beta, family)
    return _within_core(G, e)


def within_batch_blocks(batch, beta, family):
    """Within-batch score/gradient blocks for one subject-batch.

    For a single-observation batch the off-diagonal blocks are zero.
    """
    return batched_within_blocks(batch.X, batch.y, beta, family)


def _point_parts(x, y, beta, family):
    """Mean pieces at a single observation (vectorized over leading dims).

    Returns (d, a, r): derivative row, variance, residual.
    """
    md = mean_deriv(x, np.asarray(beta, dtype=np.float64), family)
    r = np.asarray(y, dtype=np.float64) - md.mu
    return md.D, md.a_diag, r


def batched_cross_blocks(x_last, y_last, x_first, y_first, beta, family):
    """Cross-batch blocks for stacked subjects.

    Args:
        x_last, y_last: final observation of the earlier batch, shapes
            (..., p) and (...,).
        x_first, y_first: first observation of the later batch.

    Returns:
        (u_fwd, u_bwd, s_fwd, s_bwd): shapes (..., p) and (..., p, p).
        ``u_fwd`` pairs the earlier batch's derivative row with the later
        batch's residual; ``u_bwd`` is the mirror image; ``s_bwd`` is the
        exact transpose of ``s_fwd``.
    """
    d_l, a_l, r_l = _point_parts(x_last, y_last, beta, family)
    d_f, a_f, r_f = _point_parts(x_first, y_first, beta, family)
    c = 1.0 / np.sqrt(a_l * a_f)
    u_fwd = (c * r_f)[..., None] * d_l
    u_bwd = (c * r_l)[..., None] * d_f
    s_fwd = c[..., None, None] * d_l[..., :, None] * d_f[..., None, :]
    s_bwd = np.swapaxes(s_fwd, -1, -2)
    return u_fwd, u_bwd, s_fwd, s_bwd


def cross_batch_blocks(prev_last, next_first, beta, family):
    """Cross-batch blocks from (x, y) pairs of two adjacent observations."""
    x_l, y_l = prev_last
    x_f, y_f = next_first
    return batched_cross_blocks(
        np.asarray(x_l, dtype=np.float64), float(y_l),
        np.asarray(x_f, dtype=np.float64), float(y_f),
        beta, family,
    )


def stack_extended(u1, u2_total=None):
    """Stack score blocks into the extended score, identity block first."""
    u1 = np.asarray(u1, dtype=np.float64)
    if u2_total is None:
        return u1 + 0.0
    u2_total = np.asarray(u2_total, dtype=np.float64)
    if u1.shape != u2_total.shape:
        raise ValidationError(
            f"score block shapes differ: {u1.shape} vs {u2_total.shape}"
        )
    return np.concatenate([u1, u2_total], axis=-1)


def stack_gradient(s1, s2_total=None):
    """Stack gradient blocks, identity block first; shape (..., S*p, p)."""
    s1 = np.asarray(s1, dtype=np.float64)
    if s2_total is None:
        return s1 + 0.0
    s2_total = np.asarray(s2_total, dtype=np.float64)
    if s1.shape != s2_total.shape:
        raise ValidationError(
            f"gradient block shapes differ: {s1.shape} vs {s2_total.shape}"
        )
    return np.concatenate([s1, s2_total], axis=-2)


def split_extended(u, p):
    """Inverse of :func:`stack_extended` for a two-basis extended score."""
    u = np.asarray(u)
    if u.shape[-1] != 2 * p:
        raise ValidationError(f"cannot split length-{u.shape[-1]} score at p={p}")
    return u[..., :p], u[..., p:]


def accumulated_score(batches, t_b, q, beta, family, basis: BasisSet = BasisSet(2)):
    """Blockwise assembly of one subject's extended score over its batches.

    Sums per-batch blocks with exponential decay weights q^(t_b - t_j); the
    forward cross term linking batches j and j+1 carries q^(t_b - t_{j+1}),
    the backward term q^(t_b - t_j). Used as the streaming-side half of the
    decomposition identity against the dense evaluation.
    """
    family = resolve_family(family)
    beta = np.asarray(beta, dtype=np.float64)
    p = beta.shape[0]
    u1_sum = np.zeros(p)
    u2_sum = np.zeros(p)
    for j, batch in enumerate(batches):
        w = q ** (t_b - batch.t)
        u1, u2, _, _ = within_batch_blocks(batch, beta, family)
        u1_sum += w * u1
        if basis.s_count == 2:
            u2_sum += w * u2
            if j + 1 < len(batches):
                nxt = batches[j + 1]
                u_fwd, u_bwd, _, _ = cross_batch_blocks(
                    (batch.X[-1], batch.y[-1]), (nxt.X[0], nxt.y[0]), beta, family
                )
                u2_sum += q ** (t_b - nxt.t) * u_fwd
                u2_sum += w * u_bwd
    if basis.s_count == 1:
        return stack_extended(u1_sum)
    return stack_extended(u1_sum, u2_sum)
