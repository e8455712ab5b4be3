"""Models for the cause-missingness mechanism.

Two nuisance fits feed the weighted estimators: a per-stratum logistic
model for the probability that a failure's cause is recorded
(``completeness``), and a per-stratum multinomial-logistic model for the
cause probabilities given that a failure occurred (``cause model``),
fit on complete cases only. Both condition on the observed failure time,
covariates, and an auxiliary mark.

A structural cause (one that is a deterministic function of the mark,
e.g. "mark below a threshold") bypasses both models: such records are
complete by construction and their cause probabilities are indicators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .errors import ConvergenceError, DataError, SeparationError

#: Hard floor applied to completeness probabilities used as inverse weights.
WEIGHT_FLOOR = 1e-6

#: Reserved design names resolving to dataset columns other than covariates.
RESERVED_FEATURES = ("t", "a")

_SCORE_TOL = 1e-8
_STEP_TOL = 1e-6  # relative Newton-step bound accepted when gains hit float limits
_MAX_ITER = 100
_COEF_BOUND = 40.0


@dataclass(frozen=True)
class StructuralCause:
    """Cause assigned deterministically when the mark falls below a cutoff."""

    cause: int
    threshold: float


def design_matrix(ds, feature_names, rows):
    """Intercept-first design matrix for the given rows.

    Names resolve against covariate names plus the reserved "t" (observed
    time) and "a" (auxiliary mark). Using "a" requires the mark to be
    present on every selected row.
    """
    cols = [np.ones(len(rows))]
    for name in feature_names:
        if name == "t":
            cols.append(ds.x[rows])
        elif name == "a":
            vals = ds.a[rows]
            if np.any(~np.isfinite(vals)):
                raise DataError(
                    "auxiliary mark is absent on rows required by the design"
                )
            cols.append(vals)
        elif name in ds.covariate_names:
            cols.append(ds.z[rows, ds.covariate_names.index(name)])
        else:
            raise DataError(
                f"unknown design feature {name!r}; choose covariates "
                f"{ds.covariate_names} or reserved names {RESERVED_FEATURES}"
            )
    return np.column_stack(cols)


def _structural_mask(ds, structural, rows):
    """Boolean mask over ``rows``: structurally complete records."""
    if structural is None:
        return np.zeros(len(rows), dtype=bool)
    vals = ds.a[rows]
    mask = np.zeros(len(rows), dtype=bool)
    fail = ds.delta[rows] == 1
    sub = vals[fail]
    if np.any(~np.isfinite(sub)):
        raise DataError(
            "structural cause declared but the mark is absent on some failures"
        )
    mask[fail] = sub < structural.threshold
    return mask


def _logistic_newton(xmat, y, context):
    """Damped Newton MLE for a logistic model; returns (coef, n_iter, diag)."""
    m, q = xmat.shape
    coef = np.zeros(q)
    eta = xmat @ coef
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    for it in range(1, _MAX_ITER + 1):
        p = expit(eta)
        g = xmat.T @ (y - p)
        if np.max(np.abs(g)) <= _SCORE_TOL:
            return coef, it - 1, p
        w = p * (1.0 - p)
        h = xmat.T @ (xmat * w[:, None])
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(
                f"singular information matrix in {context}; the design may be "
                "collinear or a feature constant"
            ) from exc
        scale = 1.0
        for _ in range(40):
            cand = coef + scale * step
            eta_c = xmat @ cand
            ll_c = float(np.sum(y * eta_c - np.logaddexp(0.0, eta_c)))
            if np.isfinite(ll_c) and ll_c > ll:
                coef, eta, ll = cand, eta_c, ll_c
                break
            scale *= 0.5
        else:
            # gains have hit float resolution; near the optimum the full
            # Newton step bounds the remaining coefficient error
            if np.max(np.abs(step)) <= _STEP_TOL * (1.0 + np.max(np.abs(coef))):
                return coef, it, expit(eta)
            raise ConvergenceError(f"step halving failed in {context}")
        if np.max(np.abs(coef)) > _COEF_BOUND:
            raise SeparationError(
                f"complete separation suspected in {context}: coefficient "
                f"magnitude exceeded {_COEF_BOUND}"
            )
    raise ConvergenceError(f"no convergence after {_MAX_ITER} iterations in {context}")


@dataclass
class CompletenessFit:
    """Per-stratum (or pooled) logistic model for cause-known probability."""

    feature_names: tuple
    coef: dict
    degenerate: dict
    structural: StructuralCause | None
    pooled: bool
    floor: float = WEIGHT_FLOOR
    n_iter: dict = field(default_factory=dict)
    min_fitted: dict = field(default_factory=dict)
    floor_count: int = 0

    @property
    def n_features(self):
        return 1 + len(self.feature_names)

    def groups(self):
        return sorted(self.coef)


def _group_keys(ds, pooled):
    return [0] if pooled else list(range(1, ds.n_strata + 1))


def _group_rows(ds, key, pooled):
    return np.arange(ds.n) if pooled else ds.stratum_rows(key)


def fit_completeness(ds, features=("z1", "a"), structural=None, pooled=False):
    """Fit the completeness (cause-known) logistic model on failures.

    Strata where every failure is complete are flagged degenerate with
    fitted probability one; strata with no failures likewise. A stratum
    whose failures are all incomplete carries no information and raises.
    Structurally complete failures are excluded from the fit.
    """
    features = tuple(features)
    fit = CompletenessFit(
        feature_names=features,
        coef={},
        degenerate={},
        structural=structural,
        pooled=pooled,
    )
    for key in _group_keys(ds, pooled):
        rows = _group_rows(ds, key, pooled)
        struct = _structural_mask(ds, structural, rows)
        sel = rows[(ds.delta[rows] == 1) & ~struct]
        label = "pooled strata" if pooled else f"stratum {ds.stratum_labels[key - 1]}"
        if len(sel) == 0:
            fit.coef[key] = None
            fit.degenerate[key] = "no_failures"
            continue
        y = (ds.r[sel] == 1).astype(float)
        if np.all(y == 1.0):
            fit.coef[key] = None
            fit.degenerate[key] = "all_complete"
            continue
        if np.all(y == 0.0):
            raise SeparationError(
                f"{label} has no complete failures; completeness model unidentified"
            )
        xmat = design_matrix(ds, features, sel)
        coef, n_iter, fitted = _logistic_newton(
            xmat, y, f"completeness model, {label}"
        )
        fit.coef[key] = coef
        fit.degenerate[key] = None
        fit.n_iter[key] = n_iter
        fit.min_fitted[key] = float(np.min(fitted))
    return fit


def completeness_probabilities(ds, fit):
    """(pi, r_raw, n_floored): weighting probability per record.

    pi is 1 for censored records and structurally complete failures, else
    the fitted cause-known probability floored at ``fit.floor``. r_raw is
    the unfloored fitted probability (1 where no model applies).
    """
    pi = np.ones(ds.n)
    raw = np.ones(ds.n)
    n_floored = 0
    for key in _group_keys(ds, fit.pooled):
        rows = _group_rows(ds, key, fit.pooled)
        struct = _structural_mask(ds, fit.structural, rows)
        sel = rows[(ds.delta[rows] == 1) & ~struct]
        if len(sel) == 0 or fit.coef.get(key) is None:
            continue
        xmat = design_matrix(ds, fit.feature_names, sel)
        r_hat = expit(xmat @ fit.coef[key])
        raw[sel] = r_hat
        floored = np.maximum(r_hat, fit.floor)
        n_floored += int(np.sum(r_hat < fit.floor))
        pi[sel] = floored
    fit.floor_count = n_floored  # per-evaluation diagnostic, not cumulative
    return pi, raw, n_floored


def psi_score_vectors(ds, fit):
    """Per-record score of the completeness model, zero where it is inert."""
    out = np.zeros((ds.n, fit.n_features))
    for key in _group_keys(ds, fit.pooled):
        rows = _group_rows(ds, key, fit.pooled)
        struct = _structural_mask(ds, fit.structural, rows)
        sel = rows[(ds.delta[rows] == 1) & ~struct]
        if len(sel) == 0 or fit.coef.get(key) is None:
            continue
        xmat = design_matrix(ds, fit.feature_names, sel)
        resid = (ds.r[sel] == 1).astype(float) - expit(xmat @ fit.coef[key])
        out[sel] = resid[:, None] * xmat
    return out


def psi_information(ds, fit):
    """Group-averaged information matrices of the completeness model.

    Averaged over all records of the group (censored records contribute
    zero), matching the scaling of the per-record scores.
    """
    info = {}
    for key in _group_keys(ds, fit.pooled):
        rows = _group_rows(ds, key, fit.pooled)
        if fit.coef.get(key) is None:
            info[key] = None
            continue
        struct = _structural_mask(ds, fit.structural, rows)
        sel = rows[(ds.delta[rows] == 1) & ~struct]
        xmat = design_matrix(ds, fit.feature_names, sel)
        w = expit(xmat @ fit.coef[key])
        w = w * (1.0 - w)
        info[key] = (xmat.T @ (xmat * w[:, None])) / len(rows)
    return info


@dataclass
class CauseModelFit:
    """Multinomial-logistic cause probabilities given a failure.

    Coefficients are per modeled cause relative to the last modeled cause
    (the reference); the structural cause, if any, is never modeled.
    """

    feature_names: tuple
    coef: dict
    modeled_causes: tuple
    structural: StructuralCause | None
    pooled: bool
    n_causes: int
    n_iter: dict = field(default_factory=dict)

    @property
    def n_features(self):
        return 1 + len(self.feature_names)


def fit_cause_model(ds, features=("z1", "a"), structural=None, pooled=False):
    """Fit cause probabilities on complete failures.

    Every modeled cause must appear among each group's complete cases,
    otherwise the group's model is unidentified and this raises.
    """
    features = tuple(features)
    modeled = tuple(
        j
        for j in range(1, ds.n_causes + 1)
        if structural is None or j != structural.cause
    )
    if not modeled:
        raise DataError("no non-structural causes to model")
    fit = CauseModelFit(
        feature_names=features,
        coef={},
        modeled_causes=modeled,
        structural=structural,
        pooled=pooled,
        n_causes=ds.n_causes,
    )
    for key in _group_keys(ds, pooled):
        rows = _group_rows(ds, key, pooled)
        struct = _structural_mask(ds, structural, rows)
        sel = rows[(ds.delta[rows] == 1) & (ds.r[rows] == 1) & ~struct]
        label = "pooled strata" if pooled else f"stratum {ds.stratum_labels[key - 1]}"
        present = set(np.unique(ds.v[sel]).tolist())
        absent = [j for j in modeled if j not in present]
        if absent:
            labels = [ds.cause_labels[j - 1] for j in absent]
            raise DataError(
                f"cause(s) {labels} absent from complete cases in {label}; "
                "cause model unidentified"
            )
        if len(modeled) == 1:
            fit.coef[key] = np.zeros((0, fit.n_features))
            continue
        xmat = design_matrix(ds, features, sel)
        y = np.searchsorted(modeled, ds.v[sel])
        fit.coef[key] = _multinomial_newton(
            xmat, y, len(modeled), f"cause model, {label}"
        )
    return fit


def _multinomial_newton(xmat, y, n_classes, context):
    """MLE for multinomial logit with the last class as reference."""
    m, q = xmat.shape
    c1 = n_classes - 1
    coef = np.zeros((c1, q))

    def probs(cf):
        eta = np.column_stack([xmat @ cf.T, np.zeros(m)])
        return softmax(eta, axis=1)

    p = probs(coef)
    ll = float(np.sum(np.log(p[np.arange(m), y])))
    ind = np.zeros((m, c1))
    ind[y < c1, y[y < c1]] = 1.0
    for it in range(1, _MAX_ITER + 1):
        g = ((ind - p[:, :c1]).T @ xmat).ravel()
        if np.max(np.abs(g)) <= _SCORE_TOL:
            return coef
        h = np.zeros((c1 * q, c1 * q))
        for jj in range(c1):
            for ll_ in range(c1):
                w = p[:, jj] * ((jj == ll_) - p[:, ll_])
                h[jj * q : (jj + 1) * q, ll_ * q : (ll_ + 1) * q] = xmat.T @ (
                    xmat * w[:, None]
                )
        try:
            step = np.linalg.solve(h, g).reshape(c1, q)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(
                f"singular information matrix in {context}"
            ) from exc
        scale = 1.0
        for _ in range(40):
            cand = coef + scale * step
            p_c = probs(cand)
            ll_c = float(np.sum(np.log(p_c[np.arange(m), y])))
            if np.isfinite(ll_c) and ll_c > ll:
                coef, p, ll = cand, p_c, ll_c
                break
            scale *= 0.5
        else:
            if np.max(np.abs(step)) <= _STEP_TOL * (1.0 + np.max(np.abs(coef))):
                return coef
            raise ConvergenceError(f"step halving failed in {context}")
        if np.max(np.abs(coef)) > _COEF_BOUND:
            raise SeparationError(
                f"complete separation suspected in {context}"
            )
    raise ConvergenceError(f"no convergence after {_MAX_ITER} iterations in {context}")


def cause_probabilities(ds, fit):
    """(n, n_causes) matrix of fitted cause probabilities for failures.

    Rows of censored records are zero. Structural rows are indicator
    vectors; remaining failures get the multinomial fit (columns of any
    structural cause stay zero there). Each failure row sums to one.
    """
    out = np.zeros((ds.n, fit.n_causes))
    for key in sorted(fit.coef):
        pooled = fit.pooled
        rows = _group_rows(ds, key, pooled)
        struct = _structural_mask(ds, fit.structural, rows)
        if fit.structural is not None:
            srows = rows[struct]
            out[srows, fit.structural.cause - 1] = 1.0
        sel = rows[(ds.delta[rows] == 1) & ~struct]
        if len(sel) == 0:
            continue
        if len(fit.modeled_causes) == 1:
            out[sel, fit.modeled_causes[0] - 1] = 1.0
            continue
        xmat = design_matrix(ds, fit.feature_names, sel)
        eta = np.column_stack([xmat @ fit.coef[key].T, np.zeros(len(sel))])
        p = softmax(eta, axis=1)
        for pos, j in enumerate(fit.modeled_causes):
            out[sel, j - 1] = p[:, pos]
    return out
