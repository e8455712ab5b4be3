"""Estimating equations and solvers for the stratified cause-specific
proportional hazards model with missing causes.

Three estimators share one accumulation kernel, differing only in the
weights attached to risk sets and event terms:

* complete-case: drop every failure whose cause is unrecorded (weight r);
* inverse-probability-weighted: complete failures weighted by 1/pi_hat in
  both the events and the risk sets;
* augmented IPW: unweighted risk sets; every failure contributes its
  weighted cause indicator plus a fitted-cause-probability augmentation,
  so incomplete failures re-enter through the cause model.

Baseline cumulative hazards are Breslow-type sums of per-event masses over
risk-set denominators, and can be kernel-smoothed into hazard rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _core
from .errors import ConfigError, ConvergenceError, DataError, NumericalError
from .missingness import cause_probabilities, completeness_probabilities

_SCORE_TOL = 1e-8
_MAX_ITER = 100


@dataclass
class StratumView:
    """One stratum's records sorted by descending observed time."""

    rows: np.ndarray
    x: np.ndarray
    z: np.ndarray
    fail_pos: np.ndarray
    fail_cuts: np.ndarray
    fail_rows: np.ndarray

    @property
    def size(self):
        return len(self.x)


def build_views(ds):
    """Per-stratum sorted views (risk sets become array prefixes)."""
    views = []
    for k in range(1, ds.n_strata + 1):
        rows = ds.stratum_rows(k)
        order = np.argsort(-ds.x[rows], kind="stable")
        srt = rows[order]
        x = ds.x[srt]
        fail_pos = np.flatnonzero(ds.delta[srt] == 1)
        cuts = np.searchsorted(-x, -x[fail_pos], side="right")
        views.append(
            StratumView(
                rows=srt,
                x=x,
                z=np.ascontiguousarray(ds.z[srt]),
                fail_pos=fail_pos,
                fail_cuts=cuts.astype(np.int64),
                fail_rows=srt[fail_pos],
            )
        )
    return views


def _risk_weights(ds, method, pi):
    if method == "cc":
        return ds.r.astype(float)
    if method == "ipw":
        return ds.r / pi
    if method == "aipw":
        return np.ones(ds.n)
    raise ConfigError(f"unknown method {method!r}")


def _event_masses(ds, view, j, method, pi, rho):
    """Per-failure event mass for the cause-j estimating equation."""
    fr = view.fail_rows
    complete_j = ((ds.r[fr] == 1) & (ds.v[fr] == j)).astype(float)
    if method == "cc":
        return complete_j
    wr = ds.r[fr] / pi[fr]
    if method == "ipw":
        return wr * complete_j
    return wr * complete_j + (1.0 - wr) * rho[fr, j - 1]


def _nuisance_arrays(ds, method, cm, rm):
    if method == "cc":
        return np.ones(ds.n), None
    if cm is None:
        raise ConfigError(f"method {method!r} requires a completeness fit")
    pi, _, _ = completeness_probabilities(ds, cm)
    if method == "ipw":
        return pi, None
    if rm is None:
        raise ConfigError("method 'aipw' requires a cause-model fit")
    return pi, cause_probabilities(ds, rm)


def _accumulate(views, ds, j, beta, method, pi, rho, masses_override=None):
    """Sum the score and curvature across strata; also min denominator."""
    p = ds.n_covariates
    total_u = np.zeros(p)
    total_h = np.zeros((p, p))
    min_denom = np.inf
    risk_w = _risk_weights(ds, method, pi)
    for view in views:
        masses = (
            _event_masses(ds, view, j, method, pi, rho)
            if masses_override is None
            else masses_override(view)
        )
        keep = masses != 0.0
        if not np.any(keep):
            continue
        u, h, dn = _core.score_curvature(
            view.z,
            np.ascontiguousarray(risk_w[view.rows]),
            np.asarray(beta, dtype=float),
            view.fail_pos[keep],
            view.fail_cuts[keep],
            np.ascontiguousarray(masses[keep]),
        )
        total_u += u
        total_h += h
        min_denom = min(min_denom, dn)
    return total_u, total_h, min_denom


def score_cc(ds, j, beta):
    """Complete-case score for cause j at beta (unnormalized sum)."""
    views = build_views(ds)
    u, _, _ = _accumulate(views, ds, j, beta, "cc", np.ones(ds.n), None)
    return u


def score_ipw(ds, j, beta, cm):
    """Inverse-probability-weighted score for cause j at beta."""
    views = build_views(ds)
    pi, _ = _nuisance_arrays(ds, "ipw", cm, None)
    u, _, _ = _accumulate(views, ds, j, beta, "ipw", pi, None)
    return u


def score_aipw(ds, j, beta, cm, rm):
    """Augmented IPW score for cause j at beta."""
    views = build_views(ds)
    pi, rho = _nuisance_arrays(ds, "aipw", cm, rm)
    u, _, _ = _accumulate(views, ds, j, beta, "aipw", pi, rho)
    return u


@dataclass
class ModelFit:
    """Fitted coefficients for all causes under one estimator."""

    method: str
    beta: np.ndarray
    covariate_names: tuple
    n: int
    n_causes: int
    n_strata: int
    converged: list
    n_iter: list
    score_max: list
    curvature_fallbacks: int = 0
    completeness: object = None
    cause_model: object = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_covariates(self):
        return len(self.covariate_names)


def solve(ds, method, cm=None, rm=None, causes=None, tol=_SCORE_TOL, max_iter=_MAX_ITER):
    """Newton solve of the chosen estimating equations, one cause at a time.

    Starts at zero with step halving on the max score coordinate;
    convergence requires max|score|/n <= tol. The augmented estimator's
    curvature can be indefinite; when its Cholesky fails the step uses the
    nonnegative weighted-event part only (a diagnostic counts this).
    """
    views = build_views(ds)
    pi, rho = _nuisance_arrays(ds, method, cm, rm)
    p = ds.n_covariates
    causes = list(causes) if causes is not None else list(range(1, ds.n_causes + 1))
    fit = ModelFit(
        method=method,
        beta=np.zeros((ds.n_causes, p)),
        covariate_names=ds.covariate_names,
        n=ds.n,
        n_causes=ds.n_causes,
        n_strata=ds.n_strata,
        converged=[False] * ds.n_causes,
        n_iter=[0] * ds.n_causes,
        score_max=[np.nan] * ds.n_causes,
        completeness=cm if method != "cc" else None,
        cause_model=rm if method == "aipw" else None,
    )
    for j in causes:
        beta, n_iter, fallbacks = _newton_cause(
            ds, views, j, method, pi, rho, tol, max_iter
        )
        fit.beta[j - 1] = beta
        fit.converged[j - 1] = True
        fit.n_iter[j - 1] = n_iter
        u, _, _ = _accumulate(views, ds, j, beta, method, pi, rho)
        fit.score_max[j - 1] = float(np.max(np.abs(u)) / ds.n)
        fit.curvature_fallbacks += fallbacks
    return fit


def _cause_event_diagnostic(ds, j):
    counts = {
        ds.stratum_labels[k - 1]: int(
            np.sum((ds.stratum == k) & (ds.delta == 1) & (ds.r == 1) & (ds.v == j))
        )
        for k in range(1, ds.n_strata + 1)
    }
    return f"complete cause-{ds.cause_labels[j - 1]} events per stratum: {counts}"


def _newton_cause(ds, views, j, method, pi, rho, tol, max_iter):
    p = ds.n_covariates
    n_active = sum(
        int(np.sum(_event_masses(ds, view, j, method, pi, rho) != 0.0))
        for view in views
    )
    if n_active == 0:
        raise DataError(
            f"cause {ds.cause_labels[j - 1]} has no contributing events; "
            "its coefficients are unidentified"
        )
    beta = np.zeros(p)
    fallbacks = 0
    u, h, dn = _accumulate(views, ds, j, beta, method, pi, rho)
    norm = float(np.max(np.abs(u)))
    for it in range(1, max_iter + 1):
        if norm / ds.n <= tol:
            return beta, it - 1, fallbacks
        if dn < 1e-300:
            raise NumericalError(
                f"risk-set denominator vanished for cause {ds.cause_labels[j - 1]}"
            )
        step, used_fallback = _newton_step(ds, views, j, method, pi, rho, u, h)
        fallbacks += used_fallback
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            u_c, h_c, dn_c = _accumulate(views, ds, j, cand, method, pi, rho)
            norm_c = float(np.max(np.abs(u_c)))
            if np.isfinite(norm_c) and norm_c < norm:
                beta, u, h, dn, norm = cand, u_c, h_c, dn_c, norm_c
                break
            scale *= 0.5
        else:
            if norm / ds.n <= tol * 10:
                # score already at the numerical floor for this dataset
                return beta, it, fallbacks
            raise ConvergenceError(
                f"step halving failed for cause {ds.cause_labels[j - 1]} "
                f"({method}); {_cause_event_diagnostic(ds, j)}"
            )
    if norm / ds.n <= tol:
        return beta, max_iter, fallbacks
    raise ConvergenceError(
        f"no convergence for cause {ds.cause_labels[j - 1]} ({method}) after "
        f"{max_iter} iterations; {_cause_event_diagnostic(ds, j)}"
    )


def _newton_step(ds, views, j, method, pi, rho, u, h):
    """Solve h @ step = u, falling back to a definite curvature for aipw."""
    try:
        l_fac = np.linalg.cholesky(h)
        step = _cho_solve(l_fac, u)
        return step, 0
    except np.linalg.LinAlgError:
        if method != "aipw":
            raise NumericalError(
                f"singular curvature for cause {ds.cause_labels[j - 1]} "
                f"({method}); {_cause_event_diagnostic(ds, j)}"
            ) from None

    def ipw_part(view):
        fr = view.fail_rows
        return (ds.r[fr] / pi[fr]) * ((ds.r[fr] == 1) & (ds.v[fr] == j))

    _, h_fb, _ = _accumulate(
        views, ds, j, np.zeros(ds.n_covariates), "aipw", pi, rho,
        masses_override=ipw_part,
    )
    try:
        l_fac = np.linalg.cholesky(h_fb)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"singular curvature for cause {ds.cause_labels[j - 1]} (aipw); "
            f"{_cause_event_diagnostic(ds, j)}"
        ) from None
    return _cho_solve(l_fac, u), 1


def _cho_solve(l_fac, rhs):
    y = np.linalg.solve(l_fac, rhs)
    return np.linalg.solve(l_fac.T, y)


@dataclass
class BaselineHazard:
    """Breslow-type cumulative baseline hazard for one (stratum, cause)."""

    stratum: int
    cause: int
    method: str
    times: np.ndarray
    jumps: np.ndarray
    stratum_size: int
    tau: float
    negative_jump_count: int = 0

    @property
    def cumulative(self):
        return np.cumsum(self.jumps)

    def evaluate(self, t):
        """Cumulative hazard at times t (right-continuous step function)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        cum = np.concatenate([[0.0], self.cumulative])
        return cum[idx]


def breslow_baseline(ds, fit, stratum, cause):
    """Baseline cumulative hazard increments for one stratum and cause.

    Increment at a failure time = (sum of that time's event masses) /
    (risk-set denominator of the fitting method). The augmented
    estimator's masses can be negative at other-cause complete failures;
    such jumps are kept and counted, not clipped.
    """
    views = build_views(ds)
    view = views[stratum - 1]
    pi, rho = _nuisance_arrays(ds, fit.method, fit.completeness, fit.cause_model)
    masses = _event_masses(ds, view, cause, fit.method, pi, rho)
    beta = fit.beta[cause - 1]

    keep = masses != 0.0
    if not np.any(keep):
        return BaselineHazard(
            stratum=stratum,
            cause=cause,
            method=fit.method,
            times=np.empty(0),
            jumps=np.empty(0),
            stratum_size=view.size,
            tau=ds.tau,
        )
    times_f = view.x[view.fail_pos[keep]]
    masses_f = masses[keep]
    cuts_f = view.fail_cuts[keep]
    # group tied failure times (arrays are in descending-time order)
    desc_times, start = np.unique(-times_f, return_index=True)
    uniq_desc = -desc_times
    total = np.zeros(len(uniq_desc))
    np.add.at(total, np.searchsorted(-uniq_desc, -times_f), masses_f)
    risk_w = _risk_weights(ds, fit.method, pi)
    denoms, _ = _core.risk_means(
        view.z,
        np.ascontiguousarray(risk_w[view.rows]),
        np.asarray(beta, dtype=float),
        np.ascontiguousarray(cuts_f[start]),
    )
    jumps_desc = total / denoms
    jumps = jumps_desc[::-1].copy()
    return BaselineHazard(
        stratum=stratum,
        cause=cause,
        method=fit.method,
        times=uniq_desc[::-1].copy(),
        jumps=jumps,
        stratum_size=view.size,
        tau=ds.tau,
        negative_jump_count=int(np.sum(jumps < 0)),
    )


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def uniform_kernel(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.5, 0.0)


def biweight(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.9375 * (1.0 - u * u) ** 2, 0.0)


#: Symmetric kernels with support [-1, 1] (the shape the theory requires).
KERNELS = {
    "epanechnikov": epanechnikov,
    "uniform": uniform_kernel,
    "biweight": biweight,
}


@dataclass
class SmoothedHazard:
    """Kernel-smoothed baseline hazard rate on a grid.

    Values within [h, tau - h] are reliable; outside, boundary effects
    bias the estimate and ``interior`` is False.
    """

    grid: np.ndarray
    values: np.ndarray
    interior: np.ndarray
    bandwidth: float
    kernel: str
    stratum: int
    cause: int


def default_bandwidth(tau, stratum_size):
    return tau * min(0.2, stratum_size ** (-1.0 / 5.0))


def smooth_hazard(baseline, bandwidth=None, kernel="epanechnikov", grid=None):
    """Convolve baseline increments with a scaled kernel.

    lambda_hat(t) = sum_m K((t - s_m)/h)/h * jump_m. The bandwidth must
    satisfy h < tau/2, otherwise no interior point exists.
    """
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}")
    tau = baseline.tau
    h = (
        float(bandwidth)
        if bandwidth is not None
        else default_bandwidth(tau, baseline.stratum_size)
    )
    if not (0 < h < tau / 2):
        raise ConfigError(
            f"bandwidth {h} must lie in (0, tau/2) = (0, {tau / 2}); "
            "the interior reporting window [h, tau-h] would be empty"
        )
    if grid is None:
        grid = np.linspace(0.0, tau, 201)
    grid = np.asarray(grid, dtype=float)
    kfun = KERNELS[kernel]
    if len(baseline.times) == 0:
        values = np.zeros(len(grid))
    else:
        u = (grid[:, None] - baseline.times[None, :]) / h
        values = (kfun(u) @ baseline.jumps) / h
    return SmoothedHazard(
        grid=grid,
        values=values,
        interior=(grid >= h) & (grid <= tau - h),
        bandwidth=h,
        kernel=kernel,
        stratum=baseline.stratum,
        cause=baseline.cause,
    )
