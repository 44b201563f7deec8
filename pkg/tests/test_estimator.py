"""Scikit-learn style estimator facade."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from streamqif.engine import BatchArrays, init_state, update_state
from streamqif.estimator import StreamingQIF
from streamqif.exceptions import ValidationError


def long_batch(X, y, j):
    """Stacked (m, n, p) batch -> long-format rows plus subject labels."""
    m, n, p = X[:, j].shape
    rows = X[:, j].reshape(m * n, p)
    outs = y[:, j].reshape(m * n)
    subjects = np.repeat(np.arange(m), n)
    return rows, outs, subjects


class TestSklearnSurface:
    def test_get_set_params_and_clone(self):
        est = StreamingQIF(family="poisson", q=0.3, tol=1e-6)
        params = est.get_params()
        assert params["family"] == "poisson"
        assert params["q"] == 0.3
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_unfitted_access_raises(self):
        est = StreamingQIF()
        with pytest.raises(NotFittedError):
            est.predict(np.ones((2, 2)))
        with pytest.raises(NotFittedError):
            est.report()

    def test_invalid_working_structure(self, rng):
        est = StreamingQIF(working="exchangeable")
        with pytest.raises(ValidationError):
            est.fit(rng.normal(size=(4, 2)), rng.normal(size=4))


class TestFitPartialFit:
    def test_matches_engine_states(self, rng):
        m, b, n, p = 8, 3, 4, 2
        X = rng.normal(size=(m, b, n, p))
        y = rng.normal(size=(m, b, n))
        est = StreamingQIF(family="gaussian", q=0.5)
        for j in range(b):
            rows, outs, subjects = long_batch(X, y, j)
            est.partial_fit(rows, outs, subjects=subjects, t=float(j + 1))
        st = init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), 1.0, "gaussian",
                        subject_ids=tuple(range(m)))
        for j in range(1, b):
            st = update_state(st, BatchArrays(X=X[:, j], y=y[:, j]),
                              float(j + 1), 0.5)
        np.testing.assert_allclose(est.coef_, st.beta, rtol=1e-12)
        assert est.n_batches_ == b
        assert est.t_ == float(b)
        assert est.q_ == 0.5

    def test_fit_resets_the_stream(self, rng):
        m, n, p = 6, 4, 2
        X = rng.normal(size=(m, 2, n, p))
        y = rng.normal(size=(m, 2, n))
        est = StreamingQIF(family="gaussian", q=0.5)
        rows, outs, subjects = long_batch(X, y, 0)
        est.fit(rows, outs, subjects=subjects, t=1.0)
        est.partial_fit(*long_batch(X, y, 1), t=2.0)
        assert est.n_batches_ == 2
        est.fit(rows, outs, subjects=subjects, t=1.0)
        assert est.n_batches_ == 1

    def test_default_time_increments_by_one(self, rng):
        m, n, p = 6, 4, 2
        X = rng.normal(size=(m, 2, n, p))
        y = rng.normal(size=(m, 2, n))
        est = StreamingQIF(family="gaussian", q=0.5)
        est.partial_fit(*long_batch(X, y, 0))
        est.partial_fit(*long_batch(X, y, 1))
        assert est.t_ == 2.0

    def test_interleaved_subject_rows_are_grouped(self, rng):
        # Rows arrive subject-interleaved; within-subject order encodes
        # observation order.
        m, n, p = 4, 3, 2
        X = rng.normal(size=(m, 1, n, p))
        y = rng.normal(size=(m, 1, n))
        rows, outs, subjects = long_batch(X, y, 0)
        perm = np.argsort(np.tile(np.arange(n), m), kind="stable")
        est = StreamingQIF(family="gaussian", q=0.5)
        est.fit(rows[perm], outs[perm], subjects=subjects[perm], t=1.0)
        ref = StreamingQIF(family="gaussian", q=0.5)
        ref.fit(rows, outs, subjects=subjects, t=1.0)
        np.testing.assert_allclose(est.coef_, ref.coef_, rtol=1e-12)

    def test_unequal_subject_rows_rejected(self, rng):
        est = StreamingQIF(family="gaussian", q=0.5)
        with pytest.raises(ValidationError, match="same number of rows"):
            est.fit(rng.normal(size=(5, 2)), rng.normal(size=5),
                    subjects=[0, 0, 0, 1, 1])

    def test_adaptive_grid_mode(self, rng):
        m, n, p = 10, 5, 2
        X = rng.normal(size=(m, 3, n, p))
        y = rng.normal(size=(m, 3, n))
        est = StreamingQIF(family="gaussian", q=None, q_grid=(0.3, 0.7))
        for j in range(3):
            est.partial_fit(*long_batch(X, y, j), t=float(j + 1))
        assert est.q_ in (0.3, 0.7)


class TestPredictAndIntervals:
    def test_predict_applies_link_inverse(self, rng):
        m, n, p = 8, 5, 2
        X = rng.normal(size=(m, 1, n, p))
        eta = np.einsum("mbnp,p->mbn", X, np.array([0.4, -0.2]))
        mu = 1.0 / (1.0 + np.exp(-eta))
        y = (rng.random((m, 1, n)) < mu).astype(float)
        est = StreamingQIF(family="bernoulli", q=0.5)
        est.fit(*long_batch(X, y, 0), t=1.0)
        grid = rng.normal(size=(6, p))
        np.testing.assert_allclose(
            est.predict(grid),
            1.0 / (1.0 + np.exp(-grid @ est.coef_)))

    def test_conf_int_shape_and_ordering(self, rng):
        m, n, p = 8, 5, 3
        X = rng.normal(size=(m, 1, n, p))
        y = rng.normal(size=(m, 1, n))
        est = StreamingQIF(family="gaussian", q=0.5)
        est.fit(*long_batch(X, y, 0), t=1.0)
        ci = est.conf_int(0.9)
        assert ci.shape == (p, 2)
        assert np.all(ci[:, 0] <= ci[:, 1])
        assert np.all(est.stderr_ >= 0)
