"""Data generators and the Monte-Carlo replicate runner.

Generators produce panel data with batch-varying coefficients and serially
dependent outcomes:

* gaussian: additive AR(1) noise, generated by the stationary recursion
  e_1 ~ N(0, sigma2), e_k = rho * e_{k-1} + N(0, sigma2 * (1 - rho^2)).
* bernoulli: a latent AR(1) Gaussian series dichotomized at the marginal
  quantile of 1 - mu, so every observation's success probability equals
  the logistic mean exactly while thresholding preserves positive serial
  dependence.
* poisson: a Gaussian copula; the latent AR(1) series is mapped through
  the standard-normal distribution function and then the Poisson quantile
  function at the log-link mean.

The replicate runner streams each generated dataset through the engine and
aggregates root mean squared error, empirical standard error, bias,
confidence-interval coverage and length at the final batch. Per-replicate
seeds are derived from the design seed by a counter scheme, so runs are
reproducible and replicates are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtr, ndtri
from scipy.stats import poisson as poisson_dist

from .engine import BatchArrays, SolverConfig, StreamSession, default_q_candidates
from .exceptions import NumericalError, ValidationError
from .families import BERNOULLI, GAUSSIAN, POISSON, resolve_family
from .offline import CumulativeData

__all__ = [
    "SimDesign",
    "PanelData",
    "MetricsRow",
    "ReplicateResults",
    "beta_profile",
    "gaussian_benchmark_design",
    "logistic_benchmark_design",
    "poisson_benchmark_design",
    "generate",
    "gen_linear",
    "gen_logistic",
    "gen_poisson",
    "run_replicates",
    "compare_efficiency",
]


def beta_profile(terms):
    """Coefficient path from per-coefficient term specs.

    Each term is one of:
        ("const", c)      constant c
        ("sine", a)       a * sin(2 pi j / b)
        ("parabola", a)   a * 4 j (1 - j / b) / b   (peaks mid-stream)

    Returns:
        beta_fn(j, b) -> coefficient vector at batch j of b.
    """
    kinds = {"const", "sine", "parabola"}
    parsed = []
    for term in terms:
        kind, value = term
        if kind not in kinds:
            raise ValidationError(f"unknown coefficient term {kind!r}")
        parsed.append((kind, float(value)))

    def beta_fn(j, b):
        out = np.empty(len(parsed))
        for k, (kind, value) in enumerate(parsed):
            if kind == "const":
                out[k] = value
            elif kind == "sine":
                out[k] = value * np.sin(2.0 * np.pi * j / b)
            else:
                out[k] = value * 4.0 * j * (1.0 - j / b) / b
        return out

    return beta_fn


@dataclass(frozen=True)
class SimDesign:
    """A Monte-Carlo design: model, panel dimensions, dependence, decay mode."""

    family: str
    m: int
    b: int
    n_j: int
    beta_fn: object
    p: int
    sigma2: float = 4.0
    rho: float = 0.8
    seed: int = 0
    replicates: int = 100
    q: float | None = None
    q_grid: tuple | None = None
    level: float = 0.95
    labels: tuple = ()

    def __post_init__(self):
        resolve_family(self.family)
        if not -1.0 < self.rho < 1.0:
            raise ValidationError("rho must lie in (-1, 1)")
        if self.m < 1 or self.b < 1 or self.n_j < 1:
            raise ValidationError("m, b and n_j must be positive")
        if self.q is not None and self.q_grid is not None:
            raise ValidationError("specify at most one of q and q_grid")
        if not self.labels:
            object.__setattr__(self, "labels",
                               tuple(f"x{k + 1}" for k in range(self.p)))

    def candidates(self):
        """Decay candidates for adaptive mode (default grid when unset)."""
        if self.q is not None:
            return None
        if self.q_grid is not None:
            return tuple(self.q_grid)
        return default_q_candidates(self.b)

    def beta_path(self):
        """True coefficients for batches 1..b, shape (b, p)."""
        return np.stack([np.asarray(self.beta_fn(j, self.b), dtype=np.float64)
                         for j in range(1, self.b + 1)])


def gaussian_benchmark_design(m=100, b=200, n_j=20, sigma2=4.0, rho=0.8,
                              seed=0, replicates=100, q=None, q_grid=None):
    """Linear model with a sinusoidal second coefficient and AR(1) noise."""
    return SimDesign(
        family=GAUSSIAN, m=m, b=b, n_j=n_j,
        beta_fn=beta_profile([("const", 0.2), ("sine", 1.0), ("const", 0.5)]),
        p=3, sigma2=sigma2, rho=rho, seed=seed, replicates=replicates,
        q=q, q_grid=q_grid, labels=("intercept", "x1", "x2"),
    )


def logistic_benchmark_design(m=100, b=200, n_j=20, sigma2=4.0, rho=0.8,
                              seed=0, replicates=100, q=None, q_grid=None):
    """Logistic model with a mid-stream bump in the second coefficient."""
    return SimDesign(
        family=BERNOULLI, m=m, b=b, n_j=n_j,
        beta_fn=beta_profile([("const", 0.2), ("parabola", 1.0), ("const", 0.5)]),
        p=3, sigma2=sigma2, rho=rho, seed=seed, replicates=replicates,
        q=q, q_grid=q_grid, labels=("intercept", "x1", "x2"),
    )


def poisson_benchmark_design(m=100, b=100, n_j=10, rho=0.8, seed=0,
                             replicates=100, q=None, q_grid=None):
    """Log-link count model over a Gaussian copula with latent AR(1) series."""
    return SimDesign(
        family=POISSON, m=m, b=b, n_j=n_j,
        beta_fn=beta_profile([("const", 0.2), ("sine", 1.0), ("const", 0.3)]),
        p=3, sigma2=1.0, rho=rho, seed=seed, replicates=replicates,
        q=q, q_grid=q_grid, labels=("intercept", "x1", "x2"),
    )


@dataclass(frozen=True)
class PanelData:
    """One generated dataset in stacked form."""

    X: np.ndarray        # (m, b, n, p)
    y: np.ndarray        # (m, b, n)
    times: np.ndarray    # (b,)
    beta_true: np.ndarray  # (b, p)

    def batch_arrays(self, j) -> BatchArrays:
        return BatchArrays(X=self.X[:, j], y=self.y[:, j])

    @property
    def final_truth(self):
        return self.beta_true[-1]

    def to_cumulative(self, subject_ids=None) -> CumulativeData:
        return CumulativeData.from_arrays(self.X, self.y, self.times,
                                          subject_ids=subject_ids)


def ar1_series(rng, m, length, sigma2, rho):
    """Stationary AR(1) Gaussian series, shape (m, length)."""
    if not -1.0 < rho < 1.0:
        raise ValidationError("rho must lie in (-1, 1)")
    w = rng.standard_normal((m, length))
    w[:, 0] *= np.sqrt(sigma2)
    if length > 1:
        w[:, 1:] *= np.sqrt(sigma2 * (1.0 - rho * rho))
    return lfilter([1.0], [1.0, -rho], w, axis=1)


def _covariates(rng, design):
    """Intercept plus independent standard-normal longitudinal covariates."""
    m, b, n, p = design.m, design.b, design.n_j, design.p
    X = np.empty((m, b, n, p))
    X[..., 0] = 1.0
    if p > 1:
        X[..., 1:] = rng.standard_normal((m, b, n, p - 1))
    return X


def _linear_predictor(X, beta_path):
    return np.einsum("mbnp,bp->mbn", X, beta_path)


def gen_linear(design: SimDesign, rng) -> PanelData:
    """Gaussian outcomes: batch-varying means plus AR(1) noise."""
    if design.family != GAUSSIAN:
        raise ValidationError("gen_linear requires the gaussian family")
    beta_path = design.beta_path()
    X = _covariates(rng, design)
    eta = _linear_predictor(X, beta_path)
    noise = ar1_series(rng, design.m, design.b * design.n_j,
                       design.sigma2, design.rho)
    y = eta + noise.reshape(design.m, design.b, design.n_j)
    times = np.arange(1.0, design.b + 1.0)
    return PanelData(X=X, y=y, times=times, beta_true=beta_path)


def gen_logistic(design: SimDesign, rng) -> PanelData:
    """Binary outcomes with exact logistic marginals.

    The latent AR(1) series is thresholded at its own marginal quantile of
    1 - mu, so P(y = 1) = mu holds exactly per observation.
    """
    if design.family != BERNOULLI:
        raise ValidationError("gen_logistic requires the bernoulli family")
    beta_path = design.beta_path()
    X = _covariates(rng, design)
    eta = np.clip(_linear_predictor(X, beta_path), -35.0, 35.0)
    mu = 1.0 / (1.0 + np.exp(-eta))
    z = ar1_series(rng, design.m, design.b * design.n_j,
                   design.sigma2, design.rho)
    z = z.reshape(design.m, design.b, design.n_j)
    threshold = np.sqrt(design.sigma2) * ndtri(1.0 - mu)
    y = (z > threshold).astype(np.float64)
    times = np.arange(1.0, design.b + 1.0)
    return PanelData(X=X, y=y, times=times, beta_true=beta_path)


def gen_poisson(design: SimDesign, rng) -> PanelData:
    """Count outcomes through a Gaussian copula with latent AR(1) series."""
    if design.family != POISSON:
        raise ValidationError("gen_poisson requires the poisson family")
    beta_path = design.beta_path()
    X = _covariates(rng, design)
    eta = _linear_predictor(X, beta_path)
    mu = np.exp(np.clip(eta, -30.0, 30.0))
    z = ar1_series(rng, design.m, design.b * design.n_j, 1.0, design.rho)
    u = np.clip(ndtr(z.reshape(design.m, design.b, design.n_j)),
                1e-16, 1.0 - 1e-16)
    y = poisson_dist.ppf(u, mu)
    times = np.arange(1.0, design.b + 1.0)
    return PanelData(X=X, y=y, times=times, beta_true=beta_path)


_GENERATORS = {GAUSSIAN: gen_linear, BERNOULLI: gen_logistic,
               POISSON: gen_poisson}


def replicate_rng(design: SimDesign, replicate):
    """Counter-derived generator for one replicate."""
    return np.random.default_rng([design.seed, replicate])


def generate(design: SimDesign, replicate=0) -> PanelData:
    """Generate one replicate's dataset (deterministic in seed and index)."""
    return _GENERATORS[design.family](design, replicate_rng(design, replicate))


@dataclass(frozen=True)
class MetricsRow:
    """Monte-Carlo summary for one coefficient."""

    coefficient: str
    rmse: float
    ese: float
    bias: float
    cp: float
    len: float


@dataclass
class ReplicateResults:
    """Raw per-replicate records plus the aggregated metrics."""

    truth: np.ndarray
    labels: tuple
    estimates: np.ndarray   # (R, p)
    std_errs: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    q_used: np.ndarray      # (R,)
    n_failed: int = 0
    failures: list = field(default_factory=list)

    def metrics(self):
        est = self.estimates
        rmse = np.sqrt(np.mean((est - self.truth) ** 2, axis=0))
        ese = np.std(est, axis=0, ddof=1) if est.shape[0] > 1 \
            else np.zeros(est.shape[1])
        bias = np.mean(est, axis=0) - self.truth
        hit = (self.ci_lower <= self.truth) & (self.truth <= self.ci_upper)
        cp = np.mean(hit, axis=0)
        length = np.mean(self.ci_upper - self.ci_lower, axis=0)
        return [
            MetricsRow(coefficient=self.labels[k], rmse=float(rmse[k]),
                       ese=float(ese[k]), bias=float(bias[k]),
                       cp=float(cp[k]), len=float(length[k]))
            for k in range(est.shape[1])
        ]


def stream_fit(design: SimDesign, data: PanelData, *, s_count=2,
               config=SolverConfig()):
    """Stream one dataset through the engine and report at the final batch."""
    session = StreamSession(design.family, s_count=s_count, q=design.q,
                            candidates=design.candidates(), config=config)
    subject_ids = tuple(range(design.m))
    for j in range(design.b):
        session.push(data.batch_arrays(j), data.times[j],
                     subject_ids=subject_ids)
    return session.report(level=design.level, labels=design.labels)


def run_replicates(design: SimDesign, *, s_count=2, config=SolverConfig(),
                   fit=None) -> ReplicateResults:
    """Generate, fit and record every replicate; aggregate at the end.

    ``fit`` may override the estimator (it receives the design and the
    generated data and returns (estimate, std_err, ci_lower, ci_upper,
    q_used)); the default streams through the engine. Replicates whose fit
    raises a numerical error are recorded and excluded; more than 5%
    failures aborts the run.
    """
    records = []
    failures = []
    for rep in range(design.replicates):
        data = generate(design, rep)
        try:
            if fit is not None:
                records.append(tuple(fit(design, data)))
            else:
                rpt = stream_fit(design, data, s_count=s_count, config=config)
                records.append((rpt.beta, rpt.std_err, rpt.ci_lower,
                                rpt.ci_upper, rpt.q_used))
        except NumericalError as exc:
            failures.append((rep, str(exc)))
    if len(failures) > 0.05 * design.replicates:
        raise NumericalError(
            f"{len(failures)} of {design.replicates} replicates failed; "
            f"first failure: {failures[0][1]}"
        )
    if not records:
        raise NumericalError("no successful replicates")
    est = np.stack([r[0] for r in records])
    se = np.stack([r[1] for r in records])
    lo = np.stack([r[2] for r in records])
    hi = np.stack([r[3] for r in records])
    q = np.asarray([r[4] for r in records], dtype=np.float64)
    return ReplicateResults(
        truth=design.beta_path()[-1], labels=design.labels,
        estimates=est, std_errs=se, ci_lower=lo, ci_upper=hi, q_used=q,
        n_failed=len(failures), failures=failures,
    )


def compare_efficiency(design: SimDesign, *, config=SolverConfig()):
    """AR(1)-basis versus working-independence interval lengths, paired
    on identical datasets.

    Returns:
        (rows, results_ar1, results_indep) where rows hold one dict per
        coefficient with the mean lengths and their ratio
        (independence / AR(1) basis).
    """
    recs = {2: [], 1: []}
    failures = []
    for rep in range(design.replicates):
        data = generate(design, rep)
        try:
            pair = {}
            for s_count in (2, 1):
                rpt = stream_fit(design, data, s_count=s_count, config=config)
                pair[s_count] = (rpt.beta, rpt.std_err, rpt.ci_lower,
                                 rpt.ci_upper, rpt.q_used)
            for s_count in (2, 1):
                recs[s_count].append(pair[s_count])
        except NumericalError as exc:
            failures.append((rep, str(exc)))
    if len(failures) > 0.05 * design.replicates:
        raise NumericalError(
            f"{len(failures)} of {design.replicates} comparison replicates "
            f"failed; first failure: {failures[0][1]}"
        )
    truth = design.beta_path()[-1]
    results = {}
    for s_count in (2, 1):
        rs = recs[s_count]
        results[s_count] = ReplicateResults(
            truth=truth, labels=design.labels,
            estimates=np.stack([r[0] for r in rs]),
            std_errs=np.stack([r[1] for r in rs]),
            ci_lower=np.stack([r[2] for r in rs]),
            ci_upper=np.stack([r[3] for r in rs]),
            q_used=np.asarray([r[4] for r in rs], dtype=np.float64),
            n_failed=len(failures), failures=failures,
        )
    len_ar1 = np.mean(results[2].ci_upper - results[2].ci_lower, axis=0)
    len_ind = np.mean(results[1].ci_upper - results[1].ci_lower, axis=0)
    rows = [
        {
            "coefficient": design.labels[k],
            "len_ar1": float(len_ar1[k]),
            "len_independence": float(len_ind[k]),
            "ratio": float(len_ind[k] / len_ar1[k]),
        }
        for k in range(design.p)
    ]
    return rows, results[2], results[1]
