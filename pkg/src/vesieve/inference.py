"""Vaccine-efficacy summaries and Monte Carlo hypothesis tests.

Efficacy per cause is 1 - exp(treatment log hazard ratio); pairwise
hazard-ratio comparisons contrast two causes' treatment coefficients.
Confidence intervals come in a delta-method form and a log-transformed
form; the log form keeps better coverage and is the default.

Two test families share one Monte Carlo reference: draws from a normal
with the estimated covariance of the treatment coefficients.

* threshold family: is every cause's efficacy above a null value?
  A one-sided minimum statistic and an omnibus sum of squares, plus
  per-cause versions with step-down multiplicity adjustment.
* sieve family: is efficacy constant across causes (against a decreasing
  alternative)? Minimum and sum-of-squares statistics of standardized
  successive differences; both reject in the upper tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ConfigError

DEFAULT_DRAWS = 100_000


def mc_reference(cov, b_draws, seed=0, rng=None):
    """Draws from N(0, cov), shape (b_draws, dim), Philox-generated.

    Falls back to an eigenvalue factor when the covariance is only
    positive semidefinite.
    """
    if b_draws <= 0:
        raise ConfigError("the number of Monte Carlo draws must be positive")
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cov = (cov + cov.T) / 2.0
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if np.min(vals) < -1e-8 * max(1.0, float(np.max(vals))):
            raise ConfigError("covariance matrix is not positive semidefinite")
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    if rng is None:
        rng = np.random.Generator(np.random.Philox(seed))
    return rng.standard_normal((int(b_draws), cov.shape[0])) @ factor.T


def sidak_step_down(p_raw):
    """Step-down adjustment of raw p-values.

    Order the raw values increasingly; the i-th smallest becomes
    max over earlier ranks of 1-(1-p)^(m - rank + 1), then map back.
    Always at least the raw value, never above one, and below the
    plain Bonferroni product.
    """
    p_raw = np.asarray(p_raw, dtype=float)
    if np.any((p_raw < 0) | (p_raw > 1)):
        raise ConfigError("raw p-values must lie in [0, 1]")
    m = len(p_raw)
    order = np.argsort(p_raw, kind="stable")
    adj_sorted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        candidate = 1.0 - (1.0 - p_raw[idx]) ** (m - rank)
        running = max(running, candidate)
        adj_sorted[rank] = running
    out = np.empty(m)
    out[order] = np.minimum(adj_sorted, 1.0)
    return out


@dataclass
class TestResult:
    name: str
    statistic: float
    critical: float
    p_value: float
    reject: bool
    tail: str


@dataclass
class PerCauseTest:
    cause: int
    statistic: float
    p_raw: float
    p_adjusted: float
    reject: bool


@dataclass
class TestReport:
    family: str
    level: float
    b_draws: int
    seed: int
    causes: tuple
    overall: dict
    per_cause_one_sided: list = field(default_factory=list)
    per_cause_squared: list = field(default_factory=list)
    ve_null: float | None = None


def _select(alpha_hat, cov_alpha, causes):
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    cov_alpha = np.atleast_2d(np.asarray(cov_alpha, dtype=float))
    n_all = len(alpha_hat)
    if causes is None:
        causes = tuple(range(1, n_all + 1))
    causes = tuple(int(c) for c in causes)
    if any(c < 1 or c > n_all for c in causes) or len(set(causes)) != len(causes):
        raise ConfigError(f"cause selection {causes} invalid for {n_all} causes")
    idx = [c - 1 for c in causes]
    return alpha_hat[idx], cov_alpha[np.ix_(idx, idx)], causes


def threshold_tests(
    alpha_hat,
    cov_alpha,
    ve_null=0.3,
    level=0.05,
    b_draws=DEFAULT_DRAWS,
    seed=0,
    causes=None,
    rng=None,
):
    """Tests of "efficacy exceeds ve_null for every included cause".

    cov_alpha is the covariance of the treatment coefficient estimates
    themselves. The minimum statistic rejects in the lower tail, the sum
    of squares in the upper tail; per-cause statistics use each
    coordinate's marginal reference and step-down adjustment.
    """
    if not 0 < level < 1:
        raise ConfigError("level must be in (0, 1)")
    if ve_null >= 1:
        raise ConfigError("ve_null must be below 1")
    a_hat, cov, causes = _select(alpha_hat, cov_alpha, causes)
    sigma = np.sqrt(np.diag(cov))
    if np.any(sigma <= 0):
        raise ConfigError("covariance has a nonpositive diagonal entry")
    c0 = math.log1p(-ve_null)
    z_obs = (a_hat - c0) / sigma

    draws = mc_reference(cov, b_draws, seed=seed, rng=rng) / sigma
    ref_min = draws.min(axis=1)
    ref_sum = (draws**2).sum(axis=1)

    stat_min = float(z_obs.min())
    stat_sum = float((z_obs**2).sum())
    p_min = float(np.mean(ref_min <= stat_min))
    p_sum = float(np.mean(ref_sum >= stat_sum))
    overall = {
        "min": TestResult(
            name="min",
            statistic=stat_min,
            critical=float(np.quantile(ref_min, level)),
            p_value=p_min,
            reject=p_min < level,
            tail="lower",
        ),
        "sum": TestResult(
            name="sum",
            statistic=stat_sum,
            critical=float(np.quantile(ref_sum, 1.0 - level)),
            p_value=p_sum,
            reject=p_sum < level,
            tail="upper",
        ),
    }

    p1_raw = np.array(
        [float(np.mean(draws[:, i] <= z_obs[i])) for i in range(len(causes))]
    )
    p2_raw = np.array(
        [float(np.mean(draws[:, i] ** 2 >= z_obs[i] ** 2)) for i in range(len(causes))]
    )
    p1_adj = sidak_step_down(p1_raw)
    p2_adj = sidak_step_down(p2_raw)
    one_sided = [
        PerCauseTest(
            cause=c,
            statistic=float(z_obs[i]),
            p_raw=float(p1_raw[i]),
            p_adjusted=float(p1_adj[i]),
            reject=p1_adj[i] < level,
        )
        for i, c in enumerate(causes)
    ]
    squared = [
        PerCauseTest(
            cause=c,
            statistic=float(z_obs[i] ** 2),
            p_raw=float(p2_raw[i]),
            p_adjusted=float(p2_adj[i]),
            reject=p2_adj[i] < level,
        )
        for i, c in enumerate(causes)
    ]
    return TestReport(
        family="threshold",
        level=level,
        b_draws=int(b_draws),
        seed=_seed_tag(seed),
        causes=causes,
        overall=overall,
        per_cause_one_sided=one_sided,
        per_cause_squared=squared,
        ve_null=ve_null,
    )


def _seed_tag(seed):
    return int(seed) if seed is not None else -1


def sieve_tests(
    alpha_hat,
    cov_alpha,
    level=0.05,
    b_draws=DEFAULT_DRAWS,
    seed=0,
    causes=None,
    rng=None,
):
    """Tests of constant efficacy across the included causes.

    Standardized successive differences of the treatment coefficients;
    both the minimum and the sum of squares reject in the upper tail
    (the alternative orders efficacy decreasingly, so every difference
    drifts positive).
    """
    if not 0 < level < 1:
        raise ConfigError("level must be in (0, 1)")
    a_hat, cov, causes = _select(alpha_hat, cov_alpha, causes)
    n_c = len(causes)
    if n_c < 2:
        raise ConfigError("sieve tests need at least two causes")
    diff = np.diff(a_hat)
    var_d = np.array(
        [
            cov[i + 1, i + 1] + cov[i, i] - 2.0 * cov[i + 1, i]
            for i in range(n_c - 1)
        ]
    )
    if np.any(var_d <= 0):
        raise ConfigError("nonpositive variance for a successive difference")
    sd = np.sqrt(var_d)
    t_obs = diff / sd

    draws = np.diff(mc_reference(cov, b_draws, seed=seed, rng=rng), axis=1) / sd
    ref_min = draws.min(axis=1)
    ref_sum = (draws**2).sum(axis=1)

    stat_min = float(t_obs.min())
    stat_sum = float((t_obs**2).sum())
    p_min = float(np.mean(ref_min >= stat_min))
    p_sum = float(np.mean(ref_sum >= stat_sum))
    overall = {
        "min": TestResult(
            name="min",
            statistic=stat_min,
            critical=float(np.quantile(ref_min, 1.0 - level)),
            p_value=p_min,
            reject=p_min < level,
            tail="upper",
        ),
        "sum": TestResult(
            name="sum",
            statistic=stat_sum,
            critical=float(np.quantile(ref_sum, 1.0 - level)),
            p_value=p_sum,
            reject=p_sum < level,
            tail="upper",
        ),
    }
    return TestReport(
        family="sieve",
        level=level,
        b_draws=int(b_draws),
        seed=_seed_tag(seed),
        causes=causes,
        overall=overall,
    )


@dataclass
class EfficacyRow:
    cause: int
    log_hr: float
    se_log_hr: float
    ve: float
    se_ve: float
    ci_low: float
    ci_high: float


@dataclass
class PairRow:
    cause_num: int
    cause_den: int
    ratio: float
    se: float
    ci_low: float
    ci_high: float


@dataclass
class EfficacyReport:
    rows: list
    pairs: list
    level: float
    ci_form: str


def efficacy_report(
    alpha_hat, cov_alpha, level=0.05, ci_form="log", pairs=None, causes=None
):
    """Per-cause efficacy and pairwise hazard-ratio comparisons.

    ci_form "log" transforms a normal interval for the log hazard ratio
    (recommended); "delta" is the plain delta-method interval. Default
    pairs: successive causes in both directions.
    """
    if ci_form not in ("log", "delta"):
        raise ConfigError("ci_form must be 'log' or 'delta'")
    a_hat, cov, causes = _select(alpha_hat, cov_alpha, causes)
    zq = norm.ppf(1.0 - level / 2.0)
    rows = []
    for i, c in enumerate(causes):
        a, s = float(a_hat[i]), float(math.sqrt(cov[i, i]))
        ve = 1.0 - math.exp(a)
        se_ve = s * math.exp(a)
        if ci_form == "log":
            lo, hi = 1.0 - math.exp(a + zq * s), 1.0 - math.exp(a - zq * s)
        else:
            lo, hi = ve - zq * se_ve, ve + zq * se_ve
        rows.append(
            EfficacyRow(
                cause=c,
                log_hr=a,
                se_log_hr=s,
                ve=ve,
                se_ve=se_ve,
                ci_low=lo,
                ci_high=hi,
            )
        )

    if pairs is None:
        pairs = [(causes[i + 1], causes[i]) for i in range(len(causes) - 1)]
        pairs += [(causes[i], causes[i + 1]) for i in range(len(causes) - 1)]
    pair_rows = []
    pos = {c: i for i, c in enumerate(causes)}
    for num, den in pairs:
        if num not in pos or den not in pos:
            raise ConfigError(f"pair ({num},{den}) outside selected causes {causes}")
        i, j = pos[num], pos[den]
        d = float(a_hat[i] - a_hat[j])
        var_d = float(cov[i, i] + cov[j, j] - 2.0 * cov[i, j])
        var_d = max(var_d, 0.0)
        sd = math.sqrt(var_d)
        ratio = math.exp(d)
        pair_rows.append(
            PairRow(
                cause_num=num,
                cause_den=den,
                ratio=ratio,
                se=ratio * sd,
                ci_low=ratio * math.exp(-zq * sd),
                ci_high=ratio * math.exp(zq * sd),
            )
        )
    return EfficacyReport(rows=rows, pairs=pair_rows, level=level, ci_form=ci_form)
