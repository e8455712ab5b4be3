"""Trial generators and the replication study harness."""

import math
from dataclasses import asdict

import numpy as np
import pytest
from scipy.stats import kendalltau, kstest

from vesieve import (
    AnalysisDataset,
    ConfigError,
    PseudoTrialConfig,
    ScenarioConfig,
    StudyFailureError,
    fit_model,
    generate_pseudo_trial,
    generate_trial,
    run_study,
    scenario,
    tune_censoring_rate,
)
from vesieve.simulation import AUX_LEVELS, SCENARIOS, _stratum_counts
from oracles import survival_prob


# ------------------------------------------------------------- configuration


def test_named_scenarios_and_aux_levels():
    assert set(SCENARIOS) == {"M1", "M2", "M3", "N1", "N2", "N3"}
    assert SCENARIOS["M3"] == (math.log(0.4), math.log(0.7))
    assert SCENARIOS["N1"] == (math.log(0.5), math.log(0.5))
    assert AUX_LEVELS == {"aux0": 0.0, "aux1": 0.2, "aux2": 0.5}
    cfg = scenario("M2", aux="aux1", n=600)
    assert cfg.alpha == SCENARIOS["M2"]
    assert cfg.aux_strength == 0.2
    assert cfg.n == 600
    assert scenario("M1", aux=0.35).aux_strength == 0.35
    with pytest.raises(ConfigError):
        scenario("M9")
    with pytest.raises(ConfigError):
        scenario("M1", aux="aux9")


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(alpha=(-0.5,), gamma=(1.0, 1.0))
    with pytest.raises(ConfigError):
        ScenarioConfig(theta=((0.2,), (0.5, 0.5), (1.0, 1.0)))
    with pytest.raises(ConfigError):
        ScenarioConfig(theta=((-1.5, 0.2), (0.5, 0.5), (1.0, 1.0)))
    with pytest.raises(ConfigError):
        ScenarioConfig(censoring_target=1.0)
    with pytest.raises(ConfigError):
        ScenarioConfig(stratum_probs=(0.5, 0.5))
    cfg = ScenarioConfig()
    assert cfg.n_causes == 2 and cfg.n_strata == 3


def test_stratum_counts_deterministic():
    assert _stratum_counts(ScenarioConfig(n=1200)) == [400, 400, 400]
    assert _stratum_counts(ScenarioConfig(n=1202)) == [401, 401, 400]
    assert _stratum_counts(ScenarioConfig(n=7)) == [3, 2, 2]
    skew = ScenarioConfig(n=100, stratum_probs=(0.5, 0.25, 0.25))
    assert _stratum_counts(skew) == [50, 25, 25]


# ------------------------------------------------------------------ censoring


def test_tuned_censoring_hits_target():
    cfg = scenario("M2", n=100_000)
    ds = generate_trial(cfg, seed=5)
    share = 1.0 - ds.delta.mean()
    assert abs(share - cfg.censoring_target) <= 0.03


def test_tuning_is_cached_and_deterministic():
    cfg = scenario("M1", n=800)
    r1 = tune_censoring_rate(cfg)
    r2 = tune_censoring_rate(scenario("M1", n=400))  # n does not enter the key
    assert r1 == r2 > 0.0


def test_unattainable_censoring_target():
    # one cause halves the total hazard, pushing the administrative floor
    # above the default 40% target
    cfg = ScenarioConfig(
        alpha=(math.log(0.5),), gamma=(1.0,), theta=((0.2,), (0.5,), (1.0,))
    )
    with pytest.raises(ConfigError, match="unattainable"):
        tune_censoring_rate(cfg)


# ----------------------------------------------------------------- generator


def test_generate_trial_is_deterministic():
    cfg = scenario("M3", n=900)
    d1 = generate_trial(cfg, seed=21)
    d2 = generate_trial(cfg, seed=21)
    d3 = generate_trial(cfg, seed=22)
    np.testing.assert_array_equal(d1.x, d2.x)
    np.testing.assert_array_equal(d1.v, d2.v)
    np.testing.assert_array_equal(d1.z, d2.z)
    assert np.any(d1.x != d3.x)


def test_latent_records_are_consistent():
    cfg = scenario("M2", n=2000, aux="aux1")
    ds, lat = generate_trial(cfg, seed=9, return_latent=True)
    assert set(lat) == {"t", "v", "a", "censoring_rate"}
    assert lat["censoring_rate"] > 0.0
    # censoring only shortens follow-up; observed failures keep their time
    assert np.all(ds.x <= lat["t"] + 1e-12)
    ev = ds.delta == 1
    np.testing.assert_allclose(ds.x[ev], lat["t"][ev])
    assert np.all(ds.x <= cfg.tau)
    # marks are reported for failures, hidden for censored records
    assert np.all(np.isnan(ds.a[~ev]))
    np.testing.assert_allclose(ds.a[ev], lat["a"][ev])
    # incomplete failures hide the cause; complete ones carry the latent one
    assert np.all(ds.v[(ev) & (ds.r == 0)] == 0)
    np.testing.assert_array_equal(ds.v[(ev) & (ds.r == 1)], lat["v"][(ev) & (ds.r == 1)])
    # the mark lives on the cause-dependent uniform support
    a_flat = cfg.aux_strength
    lo = 2.0 * a_flat * (lat["v"] - 1)
    hi = 1.0 + 0.5 * a_flat * lat["v"]
    assert np.all((lat["a"] >= lo) & (lat["a"] <= hi))


def test_failure_times_match_the_hazard_model():
    # probability-integral transform of the latent times against the
    # analytic all-cause survival is uniform
    cfg = scenario("M2", n=100_000)
    ds, lat = generate_trial(cfg, seed=5, return_latent=True)
    alpha, gamma = np.asarray(cfg.alpha), np.asarray(cfg.gamma)
    ee = np.exp(ds.z[:, [0]] * alpha + ds.z[:, [1]] * gamma)
    u = np.empty(cfg.n)
    for k in range(1, cfg.n_strata + 1):
        sel = ds.stratum == k
        u[sel] = 1.0 - survival_prob(lat["t"][sel], cfg.theta[k - 1], ee[sel])
    assert kstest(u, "uniform").statistic <= 0.01


def test_missing_rates_by_arm():
    cfg = scenario("M2", n=100_000)
    ds = generate_trial(cfg, seed=5)
    ev = ds.delta == 1
    miss_vaccine = 1.0 - ds.r[ev & (ds.z[:, 0] == 1)].mean()
    miss_placebo = 1.0 - ds.r[ev & (ds.z[:, 0] == 0)].mean()
    assert abs(miss_vaccine - 0.45) <= 0.03
    assert abs(miss_placebo - 0.20) <= 0.03


def test_mark_cause_association_spans_levels():
    taus = {}
    for aux in ("aux0", "aux1", "aux2"):
        cfg = scenario("M2", aux=aux, n=100_000)
        _, lat = generate_trial(cfg, seed=11, return_latent=True)
        taus[aux] = float(kendalltau(lat["a"], lat["v"]).statistic)
    assert abs(taus["aux0"] - 0.0) <= 0.05
    assert abs(taus["aux1"] - 0.3) <= 0.05
    assert abs(taus["aux2"] - 0.6) <= 0.05


def test_generated_dataset_passes_model_fits():
    ds = generate_trial(scenario("M3", n=1200), seed=4)
    assert isinstance(ds, AnalysisDataset)
    fit, var = fit_model(ds, "aipw")
    assert fit.converged == [True, True]
    assert np.all(var.se > 0)


# --------------------------------------------------------------- pseudo-trial


def test_pseudo_trial_structure():
    cfg = PseudoTrialConfig()
    ds, structural = generate_pseudo_trial(cfg, seed=4)
    assert ds.n == cfg.n_placebo + cfg.n_vaccine
    trt = ds.z[:, 0]
    assert int(ds.delta[trt == 0].sum()) == cfg.cases_placebo
    assert int(ds.delta[trt == 1].sum()) == cfg.cases_vaccine
    assert ds.covariate_names == ("trt", "minority", "highrisk", "sex", "age65")
    assert ds.n_causes == 3 and structural.cause == 3
    assert structural.threshold == cfg.mark_threshold
    # low-mark failures are structurally complete and carry the last cause
    low = (ds.delta == 1) & (ds.a < cfg.mark_threshold)
    assert low.sum() > 0
    assert np.all(ds.r[low] == 1)
    assert np.all(ds.v[low] == 3)
    # non-failures complete with no cause; marks only for failures
    assert np.all(ds.r[ds.delta == 0] == 1)
    assert np.all(ds.v[ds.delta == 0] == 0)
    assert np.all(np.isnan(ds.a[ds.delta == 0]))
    assert np.all(ds.a[ds.delta == 1] >= 0.0)
    # incompleteness only among genotype-eligible failures
    hidden = ds.r == 0
    assert np.all(ds.delta[hidden] == 1)
    assert hidden.sum() > 0


def test_pseudo_trial_distance_levels():
    cfg = PseudoTrialConfig(distance_levels=True)
    assert cfg.n_causes == 5 and cfg.structural_cause == 5
    ds, structural = generate_pseudo_trial(cfg, seed=6)
    assert structural.cause == 5
    seen = set(np.unique(ds.v[(ds.delta == 1) & (ds.r == 1)]))
    assert seen <= {1, 2, 3, 4, 5}
    assert {1, 2, 5} <= seen


def test_pseudo_trial_end_to_end_fit():
    ds, structural = generate_pseudo_trial(PseudoTrialConfig(), seed=4)
    fit, var = fit_model(
        ds,
        "ipw",
        completeness_features=("trt", "a"),
        cause_features=("trt", "a"),
        structural=structural,
    )
    ve1 = 1.0 - math.exp(fit.beta[0, 0])
    # arm case totals imply strong overall protection
    assert 0.85 <= ve1 <= 0.95
    assert np.all(var.se[:, 0] > 0)


# -------------------------------------------------------------------- studies


def test_run_study_aggregation_fields():
    cfg = scenario("M1", n=400)
    s = run_study(
        cfg, 6, methods=("cc", "ipw"), tests=("threshold", "sieve"),
        test_method="ipw", b_draws=2000, seed=3,
    )
    assert s.n_reps == 6 and s.n_failed == 0
    assert set(s.estimators) == {"cc", "ipw"}
    params = s.estimators["ipw"]
    assert set(params) == {"log_hr_1", "log_hr_2", "ve_1", "ve_2", "vd_2_1"}
    assert params["log_hr_1"]["truth"] == pytest.approx(math.log(0.7))
    assert params["ve_2"]["truth"] == pytest.approx(0.3)
    assert params["vd_2_1"]["truth"] == pytest.approx(1.0)
    for stats in params.values():
        assert set(stats) == {"truth", "bias", "sse", "ese", "coverage"}
        assert np.isfinite(stats["bias"])
        assert 0.0 <= stats["coverage"] <= 1.0
    assert {"threshold_min", "threshold_sum", "sieve_min", "sieve_sum"} <= set(s.tests)
    assert s.scenario["censoring_rate"] > 0
    assert s.methods == ("cc", "ipw")


def test_run_study_deterministic_and_scheduling_independent():
    cfg = scenario("M2", n=400)
    a = run_study(cfg, 6, methods=("cc",), tests=(), seed=3)
    b = run_study(cfg, 6, methods=("cc",), tests=(), seed=3)
    c = run_study(cfg, 6, methods=("cc",), tests=(), seed=3, n_jobs=2)
    assert asdict(a) == asdict(b) == asdict(c)
    d = run_study(cfg, 6, methods=("cc",), tests=(), seed=4)
    assert asdict(a) != asdict(d)


def test_run_study_single_replicate_has_no_spread():
    s = run_study(scenario("M1", n=400), 1, methods=("cc",), tests=(), seed=0)
    assert math.isnan(s.estimators["cc"]["log_hr_1"]["sse"])
    assert np.isfinite(s.estimators["cc"]["log_hr_1"]["ese"])


def test_run_study_test_method_guard():
    with pytest.raises(ConfigError):
        run_study(scenario("M1", n=400), 2, methods=("cc",), test_method="ipw")


def test_run_study_all_replicates_failing():
    cfg = scenario("M2", n=300, missing_coef=(-7.0, 0.0, 0.0))
    with pytest.raises(StudyFailureError, match="every replicate failed") as exc:
        run_study(cfg, 3, methods=("aipw",), tests=(), seed=0)
    assert exc.value.summary.n_failed == 3
    assert exc.value.summary.estimators == {}


def test_run_study_failure_tolerance():
    cfg = scenario("M2", n=100)
    # generous tolerance: failures recorded, study completes
    s = run_study(cfg, 8, methods=("aipw",), tests=(), seed=0, max_failure_rate=1.0)
    assert 0 < s.n_failed < 8
    assert all(isinstance(i, int) and isinstance(m, str) for i, m in s.failures)
    # default tolerance: the same failures abort, summary still attached
    with pytest.raises(StudyFailureError, match="replicates failed") as exc:
        run_study(cfg, 8, methods=("aipw",), tests=(), seed=0)
    assert exc.value.summary.n_failed == s.n_failed


def test_run_study_single_cause_skips_pairwise_and_sieve():
    cfg = ScenarioConfig(
        n=500,
        alpha=(math.log(0.5),),
        gamma=(1.0,),
        theta=((0.2,), (0.5,), (1.0,)),
        censoring_target=0.5,
    )
    s = run_study(
        cfg, 4, methods=("ipw",), tests=("threshold", "sieve"),
        b_draws=2000, seed=2,
    )
    assert set(s.estimators["ipw"]) == {"log_hr_1", "ve_1"}
    assert all(name.startswith("threshold") for name in s.tests)
