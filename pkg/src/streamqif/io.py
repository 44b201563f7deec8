"""Long-format CSV ingestion, state persistence and result emission.

The state file is canonical JSON: fixed field order, plain binary64
floats (Python repr round-trips them exactly), version-tagged and hashed
over the model configuration. Saving a freshly loaded session reproduces
the file byte for byte, which is what makes estimates identical whether a
stream is processed in one process or across many.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import os
from contextlib import contextmanager

import numpy as np

from .engine import EngineState, SolverConfig, StreamSession
from .exceptions import ValidationError
from .families import Batch, resolve_family, validate_batch
from .offline import CumulativeData

FORMAT_VERSION = 1

_ID_COLUMNS = ("subject_id", "batch_index", "t", "obs_index", "y")

REPORT_COLUMNS = ("batch_index", "t", "coefficient", "estimate", "std_err",
                  "ci_lower", "ci_upper", "z", "p_value", "q_used")

METRICS_COLUMNS = ("coefficient", "rmse", "ese", "bias", "cp", "len")


# ---------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------

def _covariate_columns(header):
    """The contiguous x1..xp columns; anything else in the header is an error."""
    missing = [c for c in _ID_COLUMNS if c not in header]
    if missing:
        raise ValidationError(f"header missing required columns {missing}")
    p = 0
    while f"x{p + 1}" in header:
        p += 1
    if p == 0:
        raise ValidationError("header has no covariate columns x1..xp")
    known = set(_ID_COLUMNS) | {f"x{k + 1}" for k in range(p)}
    unknown = [c for c in header if c not in known]
    if unknown:
        raise ValidationError(f"unexpected columns in header: {unknown}")
    return [f"x{k + 1}" for k in range(p)]


def _parse_rows(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"data file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: no records")
        xcols = _covariate_columns(reader.fieldnames)
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            try:
                rows.append({
                    "line": lineno,
                    "subject_id": raw["subject_id"],
                    "batch_index": int(raw["batch_index"]),
                    "t": float(raw["t"]),
                    "obs_index": int(raw["obs_index"]),
                    "y": float(raw["y"]),
                    "x": np.array([float(raw[c]) for c in xcols]),
                })
            except (TypeError, KeyError) as exc:
                raise ValidationError(f"{path}: malformed row at line {lineno}") \
                    from exc
            except ValueError as exc:
                raise ValidationError(
                    f"{path}: non-numeric field at line {lineno}: {exc}"
                ) from exc
    if not rows:
        raise ValidationError(f"{path}: no records")
    return rows, len(xcols)


def _group_batch(rows, path, family, batch_index, t):
    """Rows of one batch index -> subject -> Batch, with full validation."""
    per_subject = {}
    seen = set()
    for r in rows:
        key = (r["subject_id"], r["batch_index"], r["obs_index"])
        if key in seen:
            raise ValidationError(
                f"{path}: duplicate (subject_id, batch_index, obs_index) "
                f"{key} at line {r['line']}"
            )
        seen.add(key)
        if r["t"] != t:
            raise ValidationError(
                f"{path}: inconsistent t within batch {batch_index} "
                f"at line {r['line']}"
            )
        per_subject.setdefault(r["subject_id"], []).append(r)
    sizes = {len(v) for v in per_subject.values()}
    if len(sizes) != 1:
        raise ValidationError(
            f"{path}: subjects contribute unequal row counts in batch "
            f"{batch_index}"
        )
    out = {}
    for sid, items in per_subject.items():
        items.sort(key=lambda r: r["obs_index"])
        expected = list(range(1, len(items) + 1))
        got = [r["obs_index"] for r in items]
        if got != expected:
            raise ValidationError(
                f"{path}: obs_index for subject {sid} batch {batch_index} "
                f"must be contiguous from 1, got {got}"
            )
        X = np.stack([r["x"] for r in items])
        y = np.array([r["y"] for r in items])
        try:
            out[sid] = validate_batch(
                Batch(X=X, y=y, t=t, subject_id=sid, batch_index=batch_index),
                family,
            )
        except ValidationError as exc:
            lines = [r["line"] for r in items]
            raise ValidationError(
                f"{path}: invalid batch for subject {sid} "
                f"(lines {lines[0]}..{lines[-1]}): {exc}"
            ) from exc
    return out


def ingest_batch(path, family):
    """Read a single-batch long-format CSV.

    Returns:
        (subject -> Batch mapping, batch time, batch index)
    """
    fam = resolve_family(family)
    rows, _ = _parse_rows(path)
    batch_indices = {r["batch_index"] for r in rows}
    if len(batch_indices) != 1:
        raise ValidationError(
            f"{path}: expected a single batch_index, found {sorted(batch_indices)}"
        )
    batch_index = batch_indices.pop()
    t = rows[0]["t"]
    mapping = _group_batch(rows, path, fam, batch_index, t)
    return mapping, t, batch_index


def ingest_long(path, family) -> CumulativeData:
    """Read a multi-batch long-format CSV into cumulative form."""
    fam = resolve_family(family)
    rows, _ = _parse_rows(path)
    by_batch = {}
    for r in rows:
        by_batch.setdefault(r["batch_index"], []).append(r)
    indices = sorted(by_batch)
    subject_histories = None
    times = []
    for bi in indices:
        batch_rows = by_batch[bi]
        t = batch_rows[0]["t"]
        mapping = _group_batch(batch_rows, path, fam, bi, t)
        if subject_histories is None:
            subject_histories = {sid: [] for sid in mapping}
        if set(mapping) != set(subject_histories):
            raise ValidationError(
                f"{path}: subject set changes at batch {bi}"
            )
        for sid, batch in mapping.items():
            subject_histories[sid].append(batch)
        times.append(t)
    if any(times[i + 1] <= times[i] for i in range(len(times) - 1)):
        raise ValidationError(f"{path}: batch times must be increasing")
    return CumulativeData.from_mapping(subject_histories, fam)


def write_long_csv(path, data: CumulativeData):
    """Write cumulative data back out in the long format."""
    p = data.p
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_ID_COLUMNS) + [f"x{k + 1}" for k in range(p)])
        for i, sid in enumerate(data.subject_ids):
            for j, batch in enumerate(data.batches[i]):
                for k in range(batch.X.shape[0]):
                    writer.writerow(
                        [sid, j + 1, repr(float(batch.t)), k + 1,
                         repr(float(batch.y[k]))]
                        + [repr(float(v)) for v in batch.X[k]]
                    )


# ---------------------------------------------------------------------
# State persistence
# ---------------------------------------------------------------------

def _state_to_dict(state: EngineState):
    scores = state.last_batch_scores
    return {
        "beta": state.beta.tolist(),
        "t_prev": float(state.t_prev),
        "batch_count": int(state.batch_count),
        "n_obs": int(state.n_obs),
        "n_iter": int(state.n_iter),
        "residual_norm": float(state.residual_norm),
        "u_tilde": state.u_tilde.tolist(),
        "s_tilde": state.s_tilde.tolist(),
        "last_x": state.last_x.tolist(),
        "last_y": state.last_y.tolist(),
        "u_total": state.u_total.tolist(),
        "s_total": state.s_total.tolist(),
        "v_total": state.v_total.tolist(),
        "last_batch_scores": None if scores is None else scores.tolist(),
    }


def _state_from_dict(d, *, family, p, s_count, subject_ids) -> EngineState:
    scores = d["last_batch_scores"]
    return EngineState(
        family=family, p=p, s_count=s_count, subject_ids=subject_ids,
        beta=np.asarray(d["beta"], dtype=np.float64),
        t_prev=float(d["t_prev"]), batch_count=int(d["batch_count"]),
        u_tilde=np.asarray(d["u_tilde"], dtype=np.float64),
        s_tilde=np.asarray(d["s_tilde"], dtype=np.float64),
        last_x=np.asarray(d["last_x"], dtype=np.float64),
        last_y=np.asarray(d["last_y"], dtype=np.float64),
        u_total=np.asarray(d["u_total"], dtype=np.float64),
        s_total=np.asarray(d["s_total"], dtype=np.float64),
        v_total=np.asarray(d["v_total"], dtype=np.float64),
        n_obs=int(d["n_obs"]), n_iter=int(d["n_iter"]),
        residual_norm=float(d["residual_norm"]),
        last_batch_scores=None if scores is None
        else np.asarray(scores, dtype=np.float64),
    )


def _config_payload(session: StreamSession, p):
    cfg = session.config
    return {
        "format_version": FORMAT_VERSION,
        "family": session.family,
        "p": int(p),
        "s_count": int(session.s_count),
        "mode": session.mode,
        "q": session.q,
        "candidates": list(session.candidates) if session.candidates else None,
        "config": {
            "tol": cfg.tol,
            "max_iter": cfg.max_iter,
            "ridge_eps": cfg.ridge_eps,
            "damping": cfg.damping,
            "check_information": cfg.check_information,
        },
    }


def config_hash(payload):
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def session_to_dict(session: StreamSession):
    if not session.started:
        raise ValidationError("cannot persist a session that has not started")
    first = session.state
    payload = _config_payload(session, first.p)
    bundles = [
        {"q": q, "state": _state_to_dict(st)}
        for q, st in session.states.items()
    ]
    return {
        **payload,
        "config_hash": config_hash(payload),
        "q_used": session.q_used,
        "subject_ids": list(first.subject_ids),
        "bundles": bundles,
    }


def session_from_dict(d) -> StreamSession:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ValidationError(
            f"state format version {version!r} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    payload = {k: d[k] for k in ("format_version", "family", "p", "s_count",
                                 "mode", "q", "candidates", "config")}
    if config_hash(payload) != d.get("config_hash"):
        raise ValidationError("state/model mismatch: config hash does not match")
    cfg = SolverConfig(**d["config"])
    session = StreamSession(
        d["family"], s_count=d["s_count"], q=d["q"],
        candidates=d["candidates"], config=cfg,
    )
    subject_ids = tuple(d["subject_ids"])
    session.states = {
        bundle["q"]: _state_from_dict(
            bundle["state"], family=d["family"], p=d["p"],
            s_count=d["s_count"], subject_ids=subject_ids,
        )
        for bundle in d["bundles"]
    }
    session.q_used = d["q_used"]
    return session


def save_session(session: StreamSession, path):
    text = json.dumps(session_to_dict(session), separators=(",", ":"))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")
    os.replace(tmp, path)


def load_session(path) -> StreamSession:
    try:
        with open(path, encoding="utf-8") as fh:
            return session_from_dict(json.load(fh))
    except FileNotFoundError:
        raise ValidationError(f"state file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"state file is not valid JSON: {path}") from exc


@contextmanager
def state_lock(path):
    """Advisory exclusive lock guarding a state file across processes."""
    lock_path = f"{path}.lock"
    fh = open(lock_path, "a+", encoding="utf-8")
    try:
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise ValidationError(
                f"state file {path} is locked by another process"
            ) from None
        yield
    finally:
        fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        fh.close()


# ---------------------------------------------------------------------
# Result emission
# ---------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def append_report_csv(path, report):
    """Append one row per coefficient, writing the header on first use."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(REPORT_COLUMNS)
        for row in report.rows():
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def write_metrics_csv(path, metrics_rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in metrics_rows:
            writer.writerow([_fmt(getattr(row, c)) for c in METRICS_COLUMNS])


def write_compare_csv(path, rows):
    cols = ("coefficient", "len_ar1", "len_independence", "ratio")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in cols])
