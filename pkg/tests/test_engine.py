"""Streaming engine: initialization, updates, decay selection, contracts."""

import numpy as np
import pytest

import streamqif.engine as engine_mod
from streamqif._solver import ScoreEval, gauss_newton
from streamqif.engine import (BatchArrays, SolverConfig, StreamSession,
                              batch_score_criterion, check_information_matrix,
                              default_q_candidates, init_state, select_q,
                              update_state)
from streamqif.exceptions import (NumericalError, NumericalWarning,
                                  ValidationError)
from streamqif.families import Batch
from streamqif.inference import covariance
from streamqif.offline import CumulativeData, offline_fit

from conftest import gaussian_panel


def batch_mapping(X, y, j, t):
    return {i: Batch(X=X[i, j], y=y[i, j], t=float(t), subject_id=i,
                     batch_index=j + 1) for i in range(X.shape[0])}


def run_stream(X, y, times, family, q, s_count=2, config=SolverConfig()):
    m = X.shape[0]
    st = init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), times[0], family,
                    s_count=s_count, config=config,
                    subject_ids=tuple(range(m)))
    states = [st]
    for j in range(1, X.shape[1]):
        st = update_state(st, BatchArrays(X=X[:, j], y=y[:, j]), times[j], q,
                          config=config)
        states.append(st)
    return states


class TestInit:
    def test_identity_basis_single_batch_is_pooled_least_squares(self, rng):
        m, n, p = 4, 6, 2
        X = rng.normal(size=(m, 1, n, p))
        y = rng.normal(size=(m, 1, n))
        st = init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), 1.0, "gaussian",
                        s_count=1, subject_ids=tuple(range(m)))
        beta_ls = np.linalg.lstsq(X.reshape(-1, p), y.reshape(-1),
                                  rcond=None)[0]
        np.testing.assert_allclose(st.beta, beta_ls, rtol=1e-10, atol=1e-12)

    def test_two_basis_init_matches_offline_oracle(self, rng):
        m, n, p = 12, 5, 3
        X = rng.normal(size=(m, 1, n, p))
        y = rng.normal(size=(m, 1, n))
        st = init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), 1.0, "gaussian",
                        s_count=2, subject_ids=tuple(range(m)))
        off = offline_fit(CumulativeData.from_arrays(X, y, (1.0,)), q=0.3,
                          family="gaussian", s_count=2)
        np.testing.assert_allclose(st.beta, off.beta, rtol=1e-10, atol=1e-12)

    def test_rank_deficient_variability_warns_and_ridges(self, rng):
        # One subject, three coefficients, two observations: the 6x6
        # variability matrix has rank 1.
        X = rng.normal(size=(1, 1, 2, 3))
        y = rng.normal(size=(1, 1, 2))
        with pytest.warns(NumericalWarning, match="ridge"):
            init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), 1.0, "gaussian",
                       s_count=2, subject_ids=(0,))

    def test_subject_order_is_sorted_for_mappings(self, rng):
        X = rng.normal(size=(2, 1, 3, 2))
        y = rng.normal(size=(2, 1, 3))
        mapping = {"b": Batch(X=X[0, 0], y=y[0, 0], t=1.0),
                   "a": Batch(X=X[1, 0], y=y[1, 0], t=1.0)}
        st = init_state(mapping, 1.0, "gaussian", s_count=1)
        assert st.subject_ids == ("a", "b")


class TestUpdateExactnessOnAffineScores:
    @pytest.mark.parametrize("q", [0.2, 0.9])
    def test_stream_equals_offline_at_every_batch(self, q, rng):
        m, b, n, p = 20, 6, 4, 3
        X, y, times = gaussian_panel(rng, m, b, n, p)
        data = CumulativeData.from_arrays(X, y, times)
        states = run_stream(X, y, times, "gaussian", q)
        for k in range(1, b):
            off = offline_fit(data.truncated(k + 1), q=q, family="gaussian")
            np.testing.assert_allclose(states[k].beta, off.beta, rtol=1e-8)
            np.testing.assert_allclose(covariance(states[k]), off.cov,
                                       rtol=1e-8)

    def test_residual_contract_at_return(self, rng):
        X, y, times = gaussian_panel(rng, 10, 4, 5, 2)
        config = SolverConfig(tol=1e-8)
        for st in run_stream(X, y, times, "gaussian", 0.5, config=config):
            assert st.residual_norm < config.tol

    def test_single_observation_batches(self, rng):
        # The off-diagonal within-batch block vanishes at n=1; the stream
        # is tied together purely by the cross-batch terms (the first
        # batch's variability matrix is rank-deficient and gets ridged).
        X, y, times = gaussian_panel(rng, 12, 6, 1, 2)
        with pytest.warns(NumericalWarning):
            states = run_stream(X, y, times, "gaussian", 0.5)
        data = CumulativeData.from_arrays(X, y, times)
        off = offline_fit(data, q=0.5, family="gaussian")
        np.testing.assert_allclose(states[-1].beta, off.beta, rtol=1e-8)


class TestLogisticDeskCase:
    def test_close_to_offline_and_iteration_bound(self, rng):
        m, b, n, p = 50, 3, 10, 3
        beta_true = np.array([0.2, 0.5, -0.3])
        X = np.concatenate([np.ones((m, b, n, 1)),
                            rng.standard_normal((m, b, n, 2))], axis=-1)
        mu = 1.0 / (1.0 + np.exp(-np.einsum("mbnp,p->mbn", X, beta_true)))
        y = (rng.random((m, b, n)) < mu).astype(float)
        times = np.arange(1.0, b + 1.0)
        states = run_stream(X, y, times, "bernoulli", 0.5)
        off = offline_fit(CumulativeData.from_arrays(X, y, times), q=0.5,
                          family="bernoulli")
        assert np.max(np.abs(states[-1].beta - off.beta)) < 0.05
        assert all(st.n_iter <= 25 for st in states)


class TestNewtonBehaviour:
    def test_zero_step_at_exact_root(self):
        # Exactly identified affine score: u_i = c_i - beta.
        c = np.array([[1.0], [2.0], [3.0]])

        def evaluate(beta):
            u = c - beta[0]
            s = np.ones((3, 1, 1))
            return ScoreEval(u_i=u, s_i=s)

        first = gauss_newton(evaluate, np.zeros(1), tol=1e-10, max_iter=50,
                             ridge_eps=1e-8)
        again = gauss_newton(evaluate, first.beta, tol=1e-10, max_iter=50,
                             ridge_eps=1e-8)
        assert again.n_iter == 0
        np.testing.assert_allclose(again.beta, first.beta)

    def test_identity_basis_gaussian_converges_in_two_iterations(self, rng):
        # Exactly identified affine system: one Newton step plus the
        # convergence check.
        X, y, times = gaussian_panel(rng, 8, 3, 5, 2)
        for st in run_stream(X, y, times, "gaussian", 0.5, s_count=1):
            assert st.n_iter <= 2

    def test_nonconvergence_carries_best_iterate(self, rng):
        # A constant nonzero score has no root anywhere.
        c = rng.normal(size=(5, 2)) + 3.0

        def evaluate(beta):
            return ScoreEval(u_i=c, s_i=np.broadcast_to(np.eye(2), (5, 2, 2)))

        with pytest.raises(NumericalError) as excinfo:
            gauss_newton(evaluate, np.zeros(2), tol=1e-10, max_iter=20,
                         ridge_eps=1e-8)
        assert excinfo.value.beta is not None
        assert np.isfinite(excinfo.value.residual_norm)
        assert excinfo.value.residual_norm > 1e-10


class TestStateContracts:
    def test_variability_matrix_symmetric_psd(self, rng):
        X, y, times = gaussian_panel(rng, 10, 5, 4, 3)
        for st in run_stream(X, y, times, "gaussian", 0.7):
            np.testing.assert_allclose(st.v_total, st.v_total.T, atol=1e-12)
            assert np.min(np.linalg.eigvalsh(st.v_total)) >= -1e-10

    def test_state_size_independent_of_batch_count(self, rng):
        X, y, times = gaussian_panel(rng, 6, 8, 4, 2)
        states = run_stream(X, y, times, "gaussian", 0.5)

        def nbytes(st):
            return sum(arr.nbytes for arr in
                       (st.u_tilde, st.s_tilde, st.last_x, st.last_y,
                        st.u_total, st.s_total, st.v_total))

        assert nbytes(states[1]) == nbytes(states[-1])

    def test_deterministic_replay(self, rng):
        X, y, times = gaussian_panel(rng, 6, 4, 5, 2)
        a = run_stream(X, y, times, "gaussian", 0.4)[-1]
        b = run_stream(X, y, times, "gaussian", 0.4)[-1]
        np.testing.assert_array_equal(a.beta, b.beta)
        np.testing.assert_array_equal(a.v_total, b.v_total)

    def test_subject_summary_view(self, rng):
        X, y, times = gaussian_panel(rng, 8, 2, 4, 2)
        st = run_stream(X, y, times, "gaussian", 0.5)[-1]
        summary = st.subject_summary(1)
        np.testing.assert_array_equal(summary.u_tilde, st.u_tilde[1])
        np.testing.assert_array_equal(summary.last_x, X[1, -1, -1])
        assert summary.last_y == y[1, -1, -1]

    def test_validation_errors(self, rng):
        X, y, times = gaussian_panel(rng, 8, 2, 3, 2)
        st = init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), 1.0, "gaussian",
                        subject_ids=tuple(range(8)))
        arr = BatchArrays(X=X[:, 1], y=y[:, 1])
        with pytest.raises(ValidationError, match="exceed"):
            update_state(st, arr, 1.0, 0.5)
        with pytest.raises(ValidationError, match="q"):
            update_state(st, arr, 2.0, 1.5)
        bad = {i: Batch(X=X[i, 1], y=y[i, 1], t=2.0) for i in range(7)}
        with pytest.raises(ValidationError, match="missing"):
            update_state(st, bad, 2.0, 0.5)
        with pytest.raises(ValidationError, match="non-finite"):
            update_state(st, BatchArrays(X=X[:, 1] * np.inf, y=y[:, 1]),
                         2.0, 0.5)


class TestDecaySelection:
    def test_singleton_candidate_is_returned(self, rng):
        X, y, times = gaussian_panel(rng, 8, 2, 4, 2)
        st = init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), times[0],
                        "gaussian", subject_ids=tuple(range(8)))
        q_opt, advanced = select_q({0.37: st},
                                   BatchArrays(X=X[:, 1], y=y[:, 1]),
                                   times[1])
        assert q_opt == 0.37
        assert set(advanced) == {0.37}

    def test_default_candidate_grid_endpoints(self):
        cands = default_q_candidates(200)
        assert len(cands) == 20
        assert cands[0] == pytest.approx(0.6126, abs=1e-3)
        assert cands[-1] == pytest.approx(0.00743, abs=1e-4)
        assert all(0.0 < c < 1.0 for c in cands)

    def test_zero_batch_score_minimizes_criterion(self, rng):
        X, y, times = gaussian_panel(rng, 5, 2, 4, 2)
        st = run_stream(X, y, times, "gaussian", 0.5)[-1]
        nonzero = batch_score_criterion(st)
        assert nonzero > 0.0
        zeroed = engine_mod.EngineState(
            **{**{f.name: getattr(st, f.name)
                  for f in engine_mod.EngineState.__dataclass_fields__.values()},
               "last_batch_scores": np.zeros_like(st.last_batch_scores)})
        with pytest.warns(NumericalWarning):
            zero_crit = batch_score_criterion(zeroed)
        assert zero_crit == 0.0
        assert zero_crit < nonzero

    def test_all_candidates_advance_and_winner_reported(self, rng):
        X, y, times = gaussian_panel(rng, 10, 4, 5, 2)
        session = StreamSession("gaussian", candidates=(0.3, 0.6, 0.9))
        for j in range(4):
            session.push(BatchArrays(X=X[:, j], y=y[:, j]), times[j],
                         subject_ids=tuple(range(10)))
        assert set(session.states) == {0.3, 0.6, 0.9}
        assert session.q_used in (0.3, 0.6, 0.9)
        counts = {st.batch_count for st in session.states.values()}
        assert counts == {4}

    def test_failed_candidate_dropped_with_warning(self, rng, monkeypatch):
        X, y, times = gaussian_panel(rng, 8, 2, 4, 2)
        st = init_state(BatchArrays(X=X[:, 0], y=y[:, 0]), times[0],
                        "gaussian", subject_ids=tuple(range(8)))
        real_update = engine_mod.update_state

        def flaky(state, batches, t_b, q, **kw):
            if q == 0.6:
                raise NumericalError("injected failure")
            return real_update(state, batches, t_b, q, **kw)

        monkeypatch.setattr(engine_mod, "update_state", flaky)
        arr = BatchArrays(X=X[:, 1], y=y[:, 1])
        with pytest.warns(NumericalWarning, match="dropping"):
            q_opt, advanced = select_q({0.3: st, 0.6: st}, arr, times[1])
        assert set(advanced) == {0.3}
        assert q_opt == 0.3

        def always_fails(state, batches, t_b, q, **kw):
            raise NumericalError("injected failure")

        monkeypatch.setattr(engine_mod, "update_state", always_fails)
        with pytest.warns(NumericalWarning):
            with pytest.raises(NumericalError, match="all decay candidates"):
                select_q({0.3: st, 0.6: st}, arr, times[1])


class TestInformationDiagnostic:
    def test_healthy_stream_passes_silently(self, rng):
        X, y, times = gaussian_panel(rng, 12, 3, 5, 2)
        config = SolverConfig(check_information=True)
        import warnings as w
        with w.catch_warnings():
            w.simplefilter("error", NumericalWarning)
            run_stream(X, y, times, "gaussian", 0.5, config=config)

    def test_sign_flipped_gradient_trips_warning(self, rng):
        X, y, times = gaussian_panel(rng, 12, 2, 5, 2)
        st = run_stream(X, y, times, "gaussian", 0.5)[-1]
        with pytest.warns(NumericalWarning, match="information"):
            check_information_matrix(st.s_total, st.v_total, -st.s_total,
                                     st.n_obs)


class TestStreamSession:
    def test_fixed_mode_requires_exactly_one_spec(self):
        with pytest.raises(ValidationError):
            StreamSession("gaussian")
        with pytest.raises(ValidationError):
            StreamSession("gaussian", q=0.5, candidates=(0.3,))

    def test_report_labels_and_q(self, rng):
        X, y, times = gaussian_panel(rng, 6, 2, 4, 2)
        session = StreamSession("gaussian", q=0.5)
        for j in range(2):
            session.push(BatchArrays(X=X[:, j], y=y[:, j]), times[j],
                         subject_ids=tuple(range(6)))
        rpt = session.report(labels=("a", "b"))
        assert rpt.labels == ("a", "b")
        assert rpt.q_used == 0.5
        assert rpt.batch_index == 2
