"""Shared test helpers."""

import numpy as np
import pytest

from streamqif.families import Batch


def random_outcomes(rng, family, n):
    if family == "gaussian":
        return rng.normal(0.0, 1.0, size=n)
    if family == "bernoulli":
        return rng.integers(0, 2, size=n).astype(float)
    return rng.poisson(1.5, size=n).astype(float)


def random_histories(rng, m, sizes, p, family, times=None):
    """Random per-subject batch histories keyed by subject id."""
    b = len(sizes)
    if times is None:
        times = np.cumsum(rng.uniform(0.5, 2.0, size=b))
    histories = {}
    for i in range(m):
        hist = []
        for j in range(b):
            X = rng.normal(0.0, 1.0, size=(sizes[j], p))
            y = random_outcomes(rng, family, sizes[j])
            hist.append(Batch(X=X, y=y, t=float(times[j]), subject_id=i,
                              batch_index=j + 1))
        histories[i] = hist
    return histories, np.asarray(times, dtype=float)


def gaussian_panel(rng, m, b, n, p, beta=None, noise=1.0, intercept=False):
    """Stacked gaussian panel (X, y, times) with constant true coefficients."""
    if beta is None:
        beta = rng.normal(0.0, 0.5, size=p)
    if intercept:
        X = np.concatenate([np.ones((m, b, n, 1)),
                            rng.standard_normal((m, b, n, p - 1))], axis=-1)
    else:
        X = rng.standard_normal((m, b, n, p))
    y = np.einsum("mbnp,p->mbn", X, beta) + noise * rng.standard_normal((m, b, n))
    return X, y, np.arange(1.0, b + 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
