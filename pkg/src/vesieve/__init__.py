"""Stratified competing-risks efficacy analysis with missing failure causes.

Fits cause-specific proportional-hazards models by complete-case, IPW,
and AIPW estimating equations, produces per-cause efficacy estimates with
sandwich confidence intervals, Monte-Carlo calibrated threshold and
heterogeneity tests, and ships a seeded simulation harness.
"""

__version__ = "0.1.0"

from ._core import BACKEND
from .data import (
    AnalysisDataset,
    Schema,
    SubjectRecord,
    ValidationReport,
    load_dataset,
    validate,
    write_dataset,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    NumericalError,
    SeparationError,
    StudyFailureError,
    VesieveError,
)
from .estimation import (
    BaselineHazard,
    KERNELS,
    ModelFit,
    SmoothedHazard,
    breslow_baseline,
    default_bandwidth,
    score_aipw,
    score_cc,
    score_ipw,
    smooth_hazard,
    solve,
)
from .inference import (
    EfficacyReport,
    TestReport,
    efficacy_report,
    mc_reference,
    sidak_step_down,
    sieve_tests,
    threshold_tests,
)
from .missingness import (
    CauseModelFit,
    CompletenessFit,
    StructuralCause,
    cause_probabilities,
    completeness_probabilities,
    fit_cause_model,
    fit_completeness,
)
from .simulation import (
    AUX_LEVELS,
    PseudoTrialConfig,
    SCENARIOS,
    ScenarioConfig,
    StudySummary,
    fit_model,
    generate_pseudo_trial,
    generate_trial,
    run_study,
    scenario,
    tune_censoring_rate,
)
from .variance import (
    IPW_WEIGHT_MODES,
    VarianceResult,
    sandwich_aipw,
    sandwich_cc,
    sandwich_ipw,
)

__all__ = [
    "AUX_LEVELS",
    "AnalysisDataset",
    "BACKEND",
    "BaselineHazard",
    "CauseModelFit",
    "CompletenessFit",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "EfficacyReport",
    "IPW_WEIGHT_MODES",
    "KERNELS",
    "ModelFit",
    "NumericalError",
    "PseudoTrialConfig",
    "SCENARIOS",
    "ScenarioConfig",
    "Schema",
    "SeparationError",
    "SmoothedHazard",
    "StructuralCause",
    "StudyFailureError",
    "StudySummary",
    "SubjectRecord",
    "TestReport",
    "ValidationReport",
    "VarianceResult",
    "VesieveError",
    "breslow_baseline",
    "cause_probabilities",
    "completeness_probabilities",
    "default_bandwidth",
    "efficacy_report",
    "fit_cause_model",
    "fit_completeness",
    "fit_model",
    "generate_pseudo_trial",
    "generate_trial",
    "load_dataset",
    "mc_reference",
    "run_study",
    "sandwich_aipw",
    "sandwich_cc",
    "sandwich_ipw",
    "scenario",
    "score_aipw",
    "score_cc",
    "score_ipw",
    "sidak_step_down",
    "sieve_tests",
    "smooth_hazard",
    "solve",
    "threshold_tests",
    "tune_censoring_rate",
    "validate",
    "write_dataset",
]
