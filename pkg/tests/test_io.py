"""CSV ingestion and state persistence."""

import json

import numpy as np
import pytest

from streamqif.engine import BatchArrays, StreamSession
from streamqif.exceptions import ValidationError
from streamqif.io import (append_report_csv, ingest_batch, ingest_long,
                          load_session, save_session, session_from_dict,
                          session_to_dict, state_lock, write_long_csv)

from conftest import gaussian_panel

HEADER = "subject_id,batch_index,t,obs_index,y,x1,x2\n"


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def started_session(rng, n_batches=2, mode="fixed"):
    X, y, times = gaussian_panel(rng, 6, n_batches, 4, 2)
    kwargs = {"q": 0.5} if mode == "fixed" else {"candidates": (0.3, 0.7)}
    session = StreamSession("gaussian", **kwargs)
    for j in range(n_batches):
        session.push(BatchArrays(X=X[:, j], y=y[:, j]), times[j],
                     subject_ids=tuple(f"s{i}" for i in range(6)))
    return session


class TestIngestBatch:
    def test_empty_file_is_rejected(self, tmp_path):
        path = write_csv(tmp_path / "b.csv", HEADER)
        with pytest.raises(ValidationError, match="no records"):
            ingest_batch(path, "gaussian")
        path2 = write_csv(tmp_path / "c.csv", "")
        with pytest.raises(ValidationError, match="no records"):
            ingest_batch(path2, "gaussian")

    def test_two_subjects_three_rows(self, tmp_path):
        rows = [HEADER]
        for sid in ("a", "b"):
            for k in range(3):
                rows.append(f"{sid},1,1.0,{k + 1},0.5,1.0,{k * 0.1}\n")
        path = write_csv(tmp_path / "b.csv", "".join(rows))
        mapping, t, batch_index = ingest_batch(path, "gaussian")
        assert set(mapping) == {"a", "b"}
        assert t == 1.0
        assert batch_index == 1
        assert mapping["a"].X.shape == (3, 2)

    def test_logit_domain_violation_names_subject(self, tmp_path):
        text = HEADER + "a,1,1.0,1,2.0,1.0,0.0\n"
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="subject a"):
            ingest_batch(path, "bernoulli")

    def test_duplicate_key_rejected(self, tmp_path):
        text = HEADER + "a,1,1.0,1,0.5,1.0,0.0\na,1,1.0,1,0.7,1.0,0.0\n"
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="duplicate"):
            ingest_batch(path, "gaussian")

    def test_noncontiguous_obs_index_rejected(self, tmp_path):
        text = HEADER + "a,1,1.0,1,0.5,1.0,0.0\na,1,1.0,3,0.7,1.0,0.0\n"
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="contiguous"):
            ingest_batch(path, "gaussian")

    def test_non_numeric_field_names_line(self, tmp_path):
        text = HEADER + "a,1,1.0,1,oops,1.0,0.0\n"
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="line 2"):
            ingest_batch(path, "gaussian")

    def test_unequal_subject_counts_rejected(self, tmp_path):
        text = HEADER + ("a,1,1.0,1,0.5,1.0,0.0\n"
                         "a,1,1.0,2,0.5,1.0,0.0\n"
                         "b,1,1.0,1,0.5,1.0,0.0\n")
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="unequal"):
            ingest_batch(path, "gaussian")

    def test_multiple_batch_indices_rejected(self, tmp_path):
        text = HEADER + "a,1,1.0,1,0.5,1.0,0.0\na,2,2.0,1,0.5,1.0,0.0\n"
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="single batch_index"):
            ingest_batch(path, "gaussian")

    def test_unknown_column_rejected(self, tmp_path):
        text = ("subject_id,batch_index,t,obs_index,y,x1,zz\n"
                "a,1,1.0,1,0.5,1.0,0.0\n")
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="unexpected"):
            ingest_batch(path, "gaussian")


class TestIngestLong:
    def test_roundtrip_through_writer(self, tmp_path, rng):
        X, y, times = gaussian_panel(rng, 3, 2, 4, 2)
        from streamqif.offline import CumulativeData
        data = CumulativeData.from_arrays(X, y, times,
                                          subject_ids=("s0", "s1", "s2"))
        path = tmp_path / "long.csv"
        write_long_csv(path, data)
        back = ingest_long(str(path), "gaussian")
        assert back.subject_ids == ("s0", "s1", "s2")
        np.testing.assert_array_equal(back.batches[1][1].X, X[1, 1])
        np.testing.assert_array_equal(back.batches[2][0].y, y[2, 0])

    def test_non_increasing_times_rejected(self, tmp_path):
        text = HEADER + ("a,1,2.0,1,0.5,1.0,0.0\n"
                         "a,2,1.0,1,0.5,1.0,0.0\n")
        path = write_csv(tmp_path / "b.csv", text)
        with pytest.raises(ValidationError, match="increasing"):
            ingest_long(path, "gaussian")


class TestStatePersistence:
    @pytest.mark.parametrize("mode", ["fixed", "adaptive"])
    def test_save_load_save_is_byte_identical(self, tmp_path, rng, mode):
        session = started_session(rng, mode=mode)
        p1 = tmp_path / "state.json"
        p2 = tmp_path / "state2.json"
        save_session(session, p1)
        save_session(load_session(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_session_continues_identically(self, tmp_path, rng):
        X, y, times = gaussian_panel(rng, 6, 3, 4, 2)
        ids = tuple(f"s{i}" for i in range(6))
        direct = StreamSession("gaussian", q=0.5)
        for j in range(3):
            direct.push(BatchArrays(X=X[:, j], y=y[:, j]), times[j],
                        subject_ids=ids)
        resumed = StreamSession("gaussian", q=0.5)
        for j in range(2):
            resumed.push(BatchArrays(X=X[:, j], y=y[:, j]), times[j],
                         subject_ids=ids)
        path = tmp_path / "state.json"
        save_session(resumed, path)
        resumed = load_session(path)
        resumed.step(BatchArrays(X=X[:, 2], y=y[:, 2]), times[2])
        np.testing.assert_array_equal(resumed.state.beta, direct.state.beta)
        np.testing.assert_array_equal(resumed.state.v_total,
                                      direct.state.v_total)

    def test_version_mismatch_fails_loudly(self, tmp_path, rng):
        session = started_session(rng)
        d = session_to_dict(session)
        d["format_version"] = 99
        with pytest.raises(ValidationError, match="version"):
            session_from_dict(d)

    def test_tampered_config_hash_rejected(self, tmp_path, rng):
        session = started_session(rng)
        d = session_to_dict(session)
        d["q"] = 0.9
        with pytest.raises(ValidationError, match="hash"):
            session_from_dict(d)

    def test_missing_state_file(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            load_session(tmp_path / "absent.json")

    def test_state_json_has_no_nan(self, tmp_path, rng):
        session = started_session(rng, mode="adaptive")
        path = tmp_path / "state.json"
        save_session(session, path)
        json.loads(path.read_text())  # strict JSON parses


class TestLockAndReport:
    def test_lock_is_exclusive(self, tmp_path):
        target = str(tmp_path / "state.json")
        with state_lock(target):
            with pytest.raises(ValidationError, match="locked"):
                with state_lock(target):
                    pass

    def test_report_append_and_full_precision(self, tmp_path, rng):
        session = started_session(rng)
        rpt = session.report()
        path = tmp_path / "report.csv"
        append_report_csv(path, rpt)
        append_report_csv(path, rpt)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("batch_index,")
        assert len(lines) == 1 + 2 * len(rpt.labels)
        est = float(lines[1].split(",")[3])
        assert est == rpt.beta[0]
