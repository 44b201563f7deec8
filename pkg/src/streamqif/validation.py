"""Input validation helpers for array and long-format panel inputs."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError
from .families import Batch, validate_batch


def as_2d_float(X, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValidationError(f"{name} must be non-empty")
    return X


def as_1d_float(y, n_rows=None, name="y"):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if n_rows is not None and y.shape[0] != n_rows:
        raise ValidationError(
            f"{name} has length {y.shape[0]}, expected {n_rows}"
        )
    return y


def group_long_batch(X, y, subjects, t, family, batch_index=1):
    """Group long-format rows of one batch into per-subject Batch objects.

    Row order within a subject is preserved (it encodes observation
    order). Every subject must contribute the same number of rows.
    """
    X = as_2d_float(X)
    y = as_1d_float(y, X.shape[0])
    if subjects is None:
        subjects = np.zeros(X.shape[0], dtype=np.int64)
    subjects = np.asarray(subjects).reshape(-1)
    if subjects.shape[0] != X.shape[0]:
        raise ValidationError(
            f"subjects has length {subjects.shape[0]}, expected {X.shape[0]}"
        )
    order = {}
    for idx, s in enumerate(subjects):
        order.setdefault(s.item() if hasattr(s, "item") else s, []).append(idx)
    counts = {len(v) for v in order.values()}
    if len(counts) != 1:
        raise ValidationError("every subject must contribute the same number of rows")
    out = {}
    for sid, idx in order.items():
        rows = np.asarray(idx)
        out[sid] = validate_batch(
            Batch(X=X[rows], y=y[rows], t=float(t), subject_id=sid,
                  batch_index=batch_index),
            family,
        )
    return out
