"""Synthetic data generators and the replication study harness.

The main generator draws stratified competing-risks data whose
cause-specific hazards are time-power curves scaled by a two-covariate
log-linear term, censors by a tuned exponential plus an administrative
horizon, attaches a cause-linked uniform auxiliary mark, and hides causes
missing-at-random through a logistic mechanism in treatment and mark.

A second generator mimics a two-arm trial with strain genotyping: fixed
arm sizes and case counts, genotype mismatch by arm, a viral-load mark,
and a structural low-mark cause that is always complete.

run_study repeats generate -> fit -> summarize over seeded replicates
(counter-based substreams, so results are identical regardless of
scheduling) and aggregates bias/SSE/ESE/coverage and test rejection
rates.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .data import AnalysisDataset
from .errors import ConfigError, DataError, NumericalError, StudyFailureError
from .estimation import solve
from .inference import sieve_tests, threshold_tests
from .missingness import StructuralCause, fit_cause_model, fit_completeness
from .variance import sandwich_aipw, sandwich_cc, sandwich_ipw

_TUNE_SEED = 0x5EED_CE25
_TUNE_SAMPLE = 200_000


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of the competing-risks trial generator."""

    n: int = 1200
    theta: tuple = ((0.2, 0.2), (0.5, 0.5), (1.0, 1.0))
    alpha: tuple = (math.log(0.4), math.log(0.7))
    gamma: tuple = (1.0, 1.0)
    tau: float = 1.0
    censoring_target: float = 0.4
    aux_strength: float = 0.0
    missing_coef: tuple = (1.5, -1.0, -0.5)
    treatment_prob: float = 0.5
    stratum_probs: tuple = ()

    @property
    def n_causes(self):
        return len(self.alpha)

    @property
    def n_strata(self):
        return len(self.theta)

    def __post_init__(self):
        if len(self.gamma) != len(self.alpha):
            raise ConfigError("alpha and gamma must have equal length")
        for row in self.theta:
            if len(row) != len(self.alpha):
                raise ConfigError("each theta row needs one entry per cause")
            if any(t <= -1 for t in row):
                raise ConfigError("theta entries must exceed -1")
        if not 0 <= self.censoring_target < 1:
            raise ConfigError("censoring_target must lie in [0, 1)")
        if self.stratum_probs and len(self.stratum_probs) != len(self.theta):
            raise ConfigError("stratum_probs must match the number of strata")


#: Treatment log-hazard-ratio pairs of the named scenarios. The M family
#: varies overall efficacy with cause-2 efficacy fixed at 0.3; the N
#: family varies the gap between the two causes' efficacies.
SCENARIOS = {
    "M1": (math.log(0.7), math.log(0.7)),
    "M2": (math.log(0.5), math.log(0.7)),
    "M3": (math.log(0.4), math.log(0.7)),
    "N1": (math.log(0.5), math.log(0.5)),
    "N2": (math.log(0.3), math.log(0.5)),
    "N3": (math.log(0.1), math.log(0.5)),
}

AUX_LEVELS = {"aux0": 0.0, "aux1": 0.2, "aux2": 0.5}


def scenario(name, aux="aux0", **overrides):
    """Named scenario config; aux picks the mark-cause association."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    if isinstance(aux, str):
        if aux not in AUX_LEVELS:
            raise ConfigError(f"unknown aux level {aux!r}; choose from {sorted(AUX_LEVELS)}")
        aux_val = AUX_LEVELS[aux]
    else:
        aux_val = float(aux)
    return ScenarioConfig(alpha=SCENARIOS[name], aux_strength=aux_val, **overrides)


def _stratum_counts(cfg):
    probs = cfg.stratum_probs or tuple(1.0 / cfg.n_strata for _ in range(cfg.n_strata))
    total = sum(probs)
    counts = [int(cfg.n * pr / total) for pr in probs]
    for i in range(cfg.n - sum(counts)):
        counts[i % cfg.n_strata] += 1
    return counts


def _invert_cumulative_hazard(exp_eta, theta_row, target):
    """Solve Lambda(t) = target for t, vectorized over subjects.

    Lambda(t) = sum_j exp(eta_j) t^(theta_j+1)/(theta_j+1); closed form
    when the exponents coincide, bisection (tolerance 1e-10) otherwise.
    """
    theta_row = np.asarray(theta_row, dtype=float)
    if np.all(theta_row == theta_row[0]):
        th = theta_row[0]
        scale = exp_eta.sum(axis=1)
        return ((th + 1.0) * target / scale) ** (1.0 / (th + 1.0))

    powers = theta_row + 1.0

    def lam(t):
        return (exp_eta * (t[:, None] ** powers[None, :] / powers[None, :])).sum(axis=1)

    hi = np.ones_like(target)
    for _ in range(200):
        need = lam(hi) < target
        if not np.any(need):
            break
        hi[need] *= 2.0
    lo = np.zeros_like(target)
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        below = lam(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < 1e-10:
            break
    return 0.5 * (lo + hi)


def _draw_failures(cfg, rng, n):
    """(stratum, z, t, v): latent failure times and causes for n subjects."""
    counts = _stratum_counts(cfg) if n == cfg.n else None
    if counts is None:
        # auxiliary draws (tuning) spread subjects like the real generator
        base = ScenarioConfig(**{**asdict(cfg), "n": n})
        counts = _stratum_counts(base)
    stratum = np.repeat(np.arange(1, cfg.n_strata + 1), counts)
    z1 = (rng.random(n) < cfg.treatment_prob).astype(float)
    z2 = rng.random(n)
    eta = z1[:, None] * np.asarray(cfg.alpha) + z2[:, None] * np.asarray(cfg.gamma)
    exp_eta = np.exp(eta)
    e_std = rng.exponential(1.0, size=n)

    t = np.empty(n)
    for k in range(1, cfg.n_strata + 1):
        sel = stratum == k
        t[sel] = _invert_cumulative_hazard(
            exp_eta[sel], cfg.theta[k - 1], e_std[sel]
        )

    # cause odds at the failure time: t^theta_kj * exp(eta_j)
    w = np.empty((n, cfg.n_causes))
    for k in range(1, cfg.n_strata + 1):
        sel = stratum == k
        th = np.asarray(cfg.theta[k - 1])
        w[sel] = t[sel][:, None] ** th[None, :] * exp_eta[sel]
    cum = np.cumsum(w, axis=1)
    u = rng.random(n) * cum[:, -1]
    v = 1 + (u[:, None] >= cum).sum(axis=1)

    z = np.column_stack([z1, z2])
    return stratum, z, t, v


def _hazard_key(cfg):
    return (
        cfg.theta,
        cfg.alpha,
        cfg.gamma,
        cfg.tau,
        cfg.treatment_prob,
        cfg.stratum_probs,
        cfg.censoring_target,
    )


_rate_cache = {}


def tune_censoring_rate(cfg, n_pre=_TUNE_SAMPLE):
    """Exponential censoring rate hitting the configured censoring share.

    Deterministic: uses a fixed-seed pre-sample of latent failure times,
    then bisects the analytic censoring probability given those times.
    Raises when the target is below the administrative-censoring floor.
    """
    key = _hazard_key(cfg)
    if key in _rate_cache:
        return _rate_cache[key]
    rng = np.random.Generator(np.random.Philox(_TUNE_SEED))
    _, _, t, _ = _draw_failures(cfg, rng, n_pre)

    def censored_share(rate):
        return 1.0 - float(np.mean((t <= cfg.tau) * np.exp(-rate * t)))

    floor = censored_share(0.0)
    target = cfg.censoring_target
    if target < floor - 1e-9:
        raise ConfigError(
            f"censoring target {target} unattainable: administrative censoring "
            f"alone yields {floor:.4f}; achievable range [{floor:.4f}, 1)"
        )
    if target <= floor:
        _rate_cache[key] = 0.0
        return 0.0
    hi = 1.0
    while censored_share(hi) < target:
        hi *= 2.0
        if hi > 1e8:
            raise ConfigError("censoring target too close to 1")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if censored_share(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    rate = 0.5 * (lo + hi)
    _rate_cache[key] = rate
    return rate


def generate_trial(cfg, seed=None, rng=None, return_latent=False):
    """One synthetic trial as an AnalysisDataset.

    The auxiliary mark is uniform on (2a(v-1), 1 + a v/2) given the latent
    cause v, so larger ``aux_strength`` a tightens the mark-cause link.
    Causes of failures are hidden with probability 1 - logistic(c0 +
    c1 z1 + c2 mark). Marks are reported for failures only.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0 if seed is None else seed))
    rate = tune_censoring_rate(cfg)
    n = cfg.n
    stratum, z, t, v = _draw_failures(cfg, rng, n)

    a_lo = 2.0 * cfg.aux_strength * (v - 1)
    a_hi = 1.0 + 0.5 * cfg.aux_strength * v
    a = a_lo + rng.random(n) * (a_hi - a_lo)

    c_time = rng.exponential(1.0 / rate, size=n) if rate > 0 else np.full(n, np.inf)
    x = np.minimum(np.minimum(t, c_time), cfg.tau)
    delta = (t <= np.minimum(c_time, cfg.tau)).astype(int)

    c0, c1, c2 = cfg.missing_coef
    keep_prob = expit(c0 + c1 * z[:, 0] + c2 * a)
    r = np.where(delta == 1, (rng.random(n) < keep_prob).astype(int), 1)

    ds = AnalysisDataset(
        x=x,
        delta=delta,
        r=r,
        v=np.where((delta == 1) & (r == 1), v, 0),
        stratum=stratum,
        z=z,
        a=np.where(delta == 1, a, np.nan),
        covariate_names=("z1", "z2"),
        tau=cfg.tau,
        n_causes=cfg.n_causes,
        n_strata=cfg.n_strata,
    )
    if return_latent:
        return ds, {"t": t, "v": v, "a": a, "censoring_rate": rate}
    return ds


@dataclass(frozen=True)
class PseudoTrialConfig:
    """Structure-matching generator for a two-arm genotyping trial."""

    n_placebo: int = 13299
    n_vaccine: int = 13271
    cases_placebo: int = 713
    cases_vaccine: int = 72
    mismatch_prob_placebo: float = 0.04
    mismatch_prob_vaccine: float = 0.10
    n_strata: int = 3
    tau: float = 1.0
    mark_threshold: float = 1.0
    mark_mean_placebo: float = 4.0
    mark_mean_vaccine: float = 3.5
    mark_sd: float = 1.5
    missing_coef: tuple = (-2.0, -0.5, 0.55)
    distance_levels: bool = False
    distance_probs_placebo: tuple = (0.90, 0.05, 0.03, 0.02)
    distance_probs_vaccine: tuple = (0.80, 0.10, 0.06, 0.04)
    covariate_probs: tuple = (0.35, 0.25, 0.5, 0.25)

    @property
    def n_causes(self):
        return 5 if self.distance_levels else 3

    @property
    def structural_cause(self):
        return self.n_causes


def generate_pseudo_trial(cfg, seed=0):
    """(dataset, structural) with a low-mark structural cause.

    Exactly the configured numbers of failures per arm; failures below the
    mark threshold are recoded to the structural cause and are complete by
    construction, the rest follow the genotype (or distance-class) draw
    and may have the cause hidden via a logistic mechanism in treatment
    and mark.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    n = cfg.n_placebo + cfg.n_vaccine
    trt = np.concatenate([np.zeros(cfg.n_placebo), np.ones(cfg.n_vaccine)])

    case = np.zeros(n, dtype=bool)
    case[rng.choice(cfg.n_placebo, size=cfg.cases_placebo, replace=False)] = True
    vac_rows = cfg.n_placebo + rng.choice(
        cfg.n_vaccine, size=cfg.cases_vaccine, replace=False
    )
    case[vac_rows] = True

    x = np.full(n, cfg.tau)
    x[case] = rng.random(case.sum()) * cfg.tau
    delta = case.astype(int)

    mark = np.full(n, np.nan)
    mean = np.where(trt == 1, cfg.mark_mean_vaccine, cfg.mark_mean_placebo)
    mark[case] = np.maximum(
        rng.normal(mean[case], cfg.mark_sd, size=case.sum()), 0.0
    )

    v = np.zeros(n, dtype=int)
    if cfg.distance_levels:
        for arm, probs in (
            (0, cfg.distance_probs_placebo),
            (1, cfg.distance_probs_vaccine),
        ):
            sel = case & (trt == arm)
            pr = np.asarray(probs, dtype=float)
            v[sel] = 1 + rng.choice(len(pr), size=sel.sum(), p=pr / pr.sum())
    else:
        p_mis = np.where(trt == 1, cfg.mismatch_prob_vaccine, cfg.mismatch_prob_placebo)
        v[case] = np.where(rng.random(case.sum()) < p_mis[case], 2, 1)
    low = case & (mark < cfg.mark_threshold)
    v[low] = cfg.structural_cause

    b0, b1, b2 = cfg.missing_coef
    genotyped = rng.random(n) < expit(b0 + b1 * trt + b2 * np.nan_to_num(mark))
    r = np.where(case & ~low, genotyped.astype(int), 1)

    zcols = [trt]
    for pr in cfg.covariate_probs:
        zcols.append((rng.random(n) < pr).astype(float))
    z = np.column_stack(zcols)

    ds = AnalysisDataset(
        x=x,
        delta=delta,
        r=r,
        v=np.where(r == 1, v, 0),
        stratum=rng.integers(1, cfg.n_strata + 1, size=n),
        z=z,
        a=mark,
        covariate_names=("trt", "minority", "highrisk", "sex", "age65"),
        tau=cfg.tau,
        n_causes=cfg.n_causes,
        n_strata=cfg.n_strata,
    )
    return ds, StructuralCause(cause=cfg.structural_cause, threshold=cfg.mark_threshold)


_SANDWICH = {"cc": sandwich_cc, "ipw": sandwich_ipw, "aipw": sandwich_aipw}


def fit_model(
    ds,
    method,
    completeness_features=("z1", "a"),
    cause_features=("z1", "a"),
    structural=None,
    pooled=False,
    ipw_weight_mode="first-order",
):
    """Fit nuisance models as needed, solve, and attach the sandwich.

    Returns (fit, variance). The completeness model is fit for "ipw" and
    "aipw"; the cause model only for "aipw".
    """
    cm = rm = None
    if method in ("ipw", "aipw"):
        cm = fit_completeness(
            ds, features=completeness_features, structural=structural, pooled=pooled
        )
    if method == "aipw":
        rm = fit_cause_model(
            ds, features=cause_features, structural=structural, pooled=pooled
        )
    fit = solve(ds, method, cm=cm, rm=rm)
    if method == "ipw":
        var = sandwich_ipw(ds, fit, ipw_weight_mode=ipw_weight_mode)
    elif method == "aipw":
        var = sandwich_aipw(ds, fit)
    else:
        var = sandwich_cc(ds, fit)
    return fit, var


def _replicate(args):
    (cfg, state, methods, tests, test_method, test_causes, ve_null, level,
     b_draws, ipw_mode) = args
    rng = np.random.Generator(np.random.Philox(state))
    ds = generate_trial(cfg, rng=rng)
    out = {}
    mc_seed_state = state.spawn(1)[0]
    for method in methods:
        fit, var = fit_model(ds, method, ipw_weight_mode=ipw_mode)
        out[method] = {
            "alpha": fit.beta[:, 0].copy(),
            "se_alpha": var.se[:, 0].copy(),
            "cov_alpha": var.cov_alpha.copy(),
        }
    if tests:
        ref = out[test_method]
        rejections = {}
        if "threshold" in tests:
            rep = threshold_tests(
                ref["alpha"],
                ref["cov_alpha"],
                ve_null=ve_null,
                level=level,
                b_draws=b_draws,
                seed=None,
                causes=test_causes,
                rng=np.random.Generator(np.random.Philox(mc_seed_state)),
            )
            rejections["threshold_min"] = rep.overall["min"].reject
            rejections["threshold_sum"] = rep.overall["sum"].reject
            for pc in rep.per_cause_one_sided:
                rejections[f"threshold_min_cause_{pc.cause}"] = pc.p_raw < level
            for pc in rep.per_cause_squared:
                rejections[f"threshold_sum_cause_{pc.cause}"] = pc.p_raw < level
        if "sieve" in tests and cfg.n_causes >= 2:
            rep = sieve_tests(
                ref["alpha"],
                ref["cov_alpha"],
                level=level,
                b_draws=b_draws,
                seed=None,
                causes=test_causes,
                rng=np.random.Generator(np.random.Philox(mc_seed_state)),
            )
            rejections["sieve_min"] = rep.overall["min"].reject
            rejections["sieve_sum"] = rep.overall["sum"].reject
        out["rejections"] = rejections
    return out


@dataclass
class StudySummary:
    scenario: dict
    n_reps: int
    n_failed: int
    failures: list
    estimators: dict
    tests: dict
    seed: int
    methods: tuple
    level: float
    ve_null: float
    b_draws: int


def run_study(
    cfg,
    n_reps,
    methods=("cc", "ipw", "aipw"),
    seed=0,
    tests=("threshold", "sieve"),
    test_method="ipw",
    test_causes=None,
    ve_null=0.3,
    level=0.05,
    b_draws=20_000,
    ipw_weight_mode="first-order",
    n_jobs=1,
    max_failure_rate=0.02,
):
    """Replicate generate/fit/test and aggregate the operating summary.

    Aggregation is by replicate index, so results do not depend on worker
    scheduling. Replicates whose fit fails are recorded and excluded; more
    than ``max_failure_rate`` of them aborts the study.
    """
    methods = tuple(methods)
    if test_method not in methods and tests:
        raise ConfigError("test_method must be among the fitted methods")
    root = np.random.SeedSequence(seed)
    states = root.spawn(n_reps)
    tasks = [
        (cfg, states[i], methods, tuple(tests or ()), test_method, test_causes,
         ve_null, level, b_draws, ipw_weight_mode)
        for i in range(n_reps)
    ]
    results = [None] * n_reps
    failures = []
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for i, res in enumerate(pool.map(_replicate_safe, tasks, chunksize=8)):
                results[i] = res
    else:
        results = [_replicate_safe(task) for task in tasks]
    for i, res in enumerate(results):
        if isinstance(res, str):
            failures.append((i, res))
            results[i] = None

    n_ok = n_reps - len(failures)
    summary = StudySummary(
        scenario={**asdict(cfg), "censoring_rate": tune_censoring_rate(cfg)},
        n_reps=n_reps,
        n_failed=len(failures),
        failures=failures[:20],
        estimators={},
        tests={},
        seed=seed,
        methods=methods,
        level=level,
        ve_null=ve_null,
        b_draws=b_draws,
    )
    if n_ok == 0:
        raise StudyFailureError("every replicate failed", summary)

    zq = float(_norm_ppf(1.0 - level / 2.0))
    ok = [res for res in results if res is not None]
    for method in methods:
        alpha = np.array([res[method]["alpha"] for res in ok])
        se = np.array([res[method]["se_alpha"] for res in ok])
        cov_a = np.array([res[method]["cov_alpha"] for res in ok])
        params = {}
        for j in range(cfg.n_causes):
            truth = cfg.alpha[j]
            est, sd = alpha[:, j], se[:, j]
            params[f"log_hr_{j + 1}"] = _param_summary(
                truth, est, sd, np.abs(est - truth) <= zq * sd
            )
            ve_truth = 1.0 - math.exp(truth)
            ve_est = 1.0 - np.exp(est)
            cover = (1.0 - np.exp(est + zq * sd) <= ve_truth) & (
                ve_truth <= 1.0 - np.exp(est - zq * sd)
            )
            params[f"ve_{j + 1}"] = _param_summary(
                ve_truth, ve_est, np.exp(est) * sd, cover
            )
        if cfg.n_causes >= 2:
            d_truth = cfg.alpha[1] - cfg.alpha[0]
            d_est = alpha[:, 1] - alpha[:, 0]
            d_sd = np.sqrt(
                np.maximum(
                    cov_a[:, 1, 1] + cov_a[:, 0, 0] - 2.0 * cov_a[:, 0, 1], 0.0
                )
            )
            ratio_truth = math.exp(d_truth)
            params["vd_2_1"] = _param_summary(
                ratio_truth,
                np.exp(d_est),
                np.exp(d_est) * d_sd,
                np.abs(d_est - d_truth) <= zq * d_sd,
            )
        summary.estimators[method] = params

    if tests:
        names = set()
        for res in ok:
            names.update(res.get("rejections", {}))
        for name in sorted(names):
            vals = [res["rejections"][name] for res in ok if name in res["rejections"]]
            summary.tests[name] = float(np.mean(vals))

    if len(failures) > max_failure_rate * n_reps:
        raise StudyFailureError(
            f"{len(failures)} of {n_reps} replicates failed "
            f"(tolerance {max_failure_rate:.0%}); first: {failures[0][1]}",
            summary,
        )
    return summary


def _replicate_safe(task):
    try:
        return _replicate(task)
    except (NumericalError, DataError) as exc:
        return f"{type(exc).__name__}: {exc}"


def _param_summary(truth, est, se, cover):
    return {
        "truth": float(truth),
        "bias": float(np.mean(est) - truth),
        "sse": float(np.std(est, ddof=1)) if len(est) > 1 else float("nan"),
        "ese": float(np.mean(se)),
        "coverage": float(np.mean(cover)),
    }


def _norm_ppf(q):
    from scipy.stats import norm

    return norm.ppf(q)
