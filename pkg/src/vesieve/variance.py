"""Sandwich variance for the weighted estimating-equation fits.

For each cause the bread is the averaged negative score derivative and
the meat stacks per-record influence residuals across all causes, so the
resulting covariance keeps cross-cause dependence (needed by the joint
tests). Residuals are martingale-type integrals of the centered covariate
against each record's counting process minus its compensator under the
fitted baseline; the inverse-weighted residual additionally corrects for
having estimated the completeness model.

The inverse-weighted residual's event weight comes in two modes: the
first-order influence argument gives R/pi_hat (the default, which lands
replication coverage on its nominal level), while "as-printed" keeps the
literal R/pi_hat^2 of the source formulation and is markedly
conservative. See ``ipw_weight_mode``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _core
from .errors import ConfigError, NumericalError
from .estimation import _event_masses, _nuisance_arrays, _risk_weights, build_views
from .missingness import (
    _group_rows,
    _structural_mask,
    design_matrix,
    psi_information,
    psi_score_vectors,
)

IPW_WEIGHT_MODES = ("first-order", "as-printed")


@dataclass
class VarianceResult:
    """Covariance of the stacked per-cause coefficient vectors."""

    method: str
    omega: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    bread: list
    meat: np.ndarray
    n: int
    n_causes: int
    n_covariates: int
    treatment_index: int = 0
    ipw_weight_mode: str | None = None

    def _alpha_idx(self):
        p = self.n_covariates
        return [j * p + self.treatment_index for j in range(self.n_causes)]

    @property
    def omega_alpha(self):
        idx = self._alpha_idx()
        return self.omega[np.ix_(idx, idx)]

    @property
    def cov_alpha(self):
        return self.omega_alpha / self.n


def _stratum_caches(ds, view, j, method, pi, rho, beta):
    """Per-stratum baseline jump times, increments, and cumulative sums.

    Returns None when the stratum has no contributing events for cause j.
    Cumulative sums cover the jump of the centered-mean compensator:
    Lam(t) and G1(t) = sum_{s<=t} mean(s) * dLam(s) under both the
    method's weighting and the unweighted risk means.
    """
    masses = _event_masses(ds, view, j, method, pi, rho)
    keep = masses != 0.0
    if not np.any(keep):
        return None
    times_f = view.x[view.fail_pos[keep]]
    masses_f = masses[keep]
    cuts_f = view.fail_cuts[keep]
    neg_uniq, start = np.unique(-times_f, return_index=True)
    grp = np.searchsorted(neg_uniq, -times_f)
    total = np.zeros(len(neg_uniq))
    np.add.at(total, grp, masses_f)

    beta = np.asarray(beta, dtype=float)
    cuts_u = np.ascontiguousarray(cuts_f[start])
    risk_w = _risk_weights(ds, method, pi)
    denom_w, mean_w = _core.risk_means(
        view.z, np.ascontiguousarray(risk_w[view.rows]), beta, cuts_u
    )
    denom_u, mean_u = _core.risk_means(view.z, np.ones(view.size), beta, cuts_u)

    # flip to ascending time
    times = -neg_uniq
    order = slice(None, None, -1)
    d_lam = (total / denom_w)[order]
    mean_w = mean_w[order]
    mean_u = mean_u[order]
    times = times[order]

    lam_cum = np.cumsum(d_lam)
    g1w_cum = np.cumsum(mean_w * d_lam[:, None], axis=0)
    g1u_cum = np.cumsum(mean_u * d_lam[:, None], axis=0)

    idx = np.searchsorted(times, view.x, side="right")
    at = np.concatenate([[0.0], lam_cum])[idx]
    g1w_at = np.vstack([np.zeros(ds.n_covariates), g1w_cum])[idx]
    g1u_at = np.vstack([np.zeros(ds.n_covariates), g1u_cum])[idx]
    # weighted/unweighted risk means at each record's own time (valid only
    # where the record's time is a jump time, which holds for every record
    # with a nonzero event mass)
    mean_w_pad = np.vstack([np.full(ds.n_covariates, np.nan), mean_w])
    mean_u_pad = np.vstack([np.full(ds.n_covariates, np.nan), mean_u])
    return {
        "lam_at": at,
        "g1w_at": g1w_at,
        "g1u_at": g1u_at,
        "mean_w_own": mean_w_pad[idx],
        "mean_u_own": mean_u_pad[idx],
    }


def _bread(ds, views, j, method, pi, rho, beta):
    from .estimation import _accumulate

    _, curv, _ = _accumulate(views, ds, j, beta, method, pi, rho)
    return curv / ds.n


def _assemble(ds, fit, bread, resid, mode=None):
    n, p = ds.n, ds.n_covariates
    jp = ds.n_causes * p
    flat = resid.reshape(n, jp)
    meat = flat.T @ flat / n
    b_inv = np.zeros((jp, jp))
    for j in range(ds.n_causes):
        blk = slice(j * p, (j + 1) * p)
        try:
            b_inv[blk, blk] = np.linalg.inv(bread[j])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"singular bread matrix for cause {ds.cause_labels[j]}"
            ) from exc
    omega = b_inv @ meat @ b_inv.T
    omega = (omega + omega.T) / 2.0
    cov = omega / n
    se = np.sqrt(np.maximum(np.diag(cov), 0.0)).reshape(ds.n_causes, p)
    return VarianceResult(
        method=fit.method,
        omega=omega,
        cov=cov,
        se=se,
        bread=bread,
        meat=meat,
        n=n,
        n_causes=ds.n_causes,
        n_covariates=p,
        ipw_weight_mode=mode,
    )


def _weighted_residuals(ds, views, fit, pi, event_w, correct_psi, mode=None):
    """Residuals for the complete-case and inverse-weighted estimators.

    event_w: per-record outer weight on the martingale integral (r for the
    complete-case fit, r/pi or r/pi^2 for the inverse-weighted one).
    correct_psi: add the completeness-estimation correction terms.
    """
    n, p, J = ds.n, ds.n_covariates, ds.n_causes
    method = fit.method
    resid = np.zeros((n, J, p))
    cm = fit.completeness

    if correct_psi:
        s_psi = psi_score_vectors(ds, cm)
        info = psi_information(ds, cm)
        pi_sq = pi * pi
    pos_maps = [
        {int(r_): i_ for i_, r_ in enumerate(view.rows)} for view in views
    ]

    for j in range(1, J + 1):
        beta = fit.beta[j - 1]
        ez_all = np.exp(ds.z @ beta)
        d_num = {}
        for k, view in enumerate(views, start=1):
            caches = _stratum_caches(ds, view, j, method, pi, None, beta)
            rows = view.rows
            if caches is None:
                continue
            own_event = (
                (ds.delta[rows] == 1) & (ds.r[rows] == 1) & (ds.v[rows] == j)
            ).astype(float)
            zc_event = np.where(
                own_event[:, None], ds.z[rows] - caches["mean_w_own"], 0.0
            )
            comp = ez_all[rows, None] * (
                ds.z[rows] * caches["lam_at"][:, None] - caches["g1w_at"]
            )
            resid[rows, j - 1] = event_w[rows, None] * (zc_event - comp)

            if correct_psi:
                zc_event_u = np.where(
                    own_event[:, None], ds.z[rows] - caches["mean_u_own"], 0.0
                )
                comp_u = ez_all[rows, None] * (
                    ds.z[rows] * caches["lam_at"][:, None] - caches["g1u_at"]
                )
                mart_u = zc_event_u - comp_u
                key = 0 if cm.pooled else k
                grp_rows = _group_rows(ds, key, cm.pooled)
                struct = _structural_mask(ds, cm.structural, grp_rows)
                model_rows = grp_rows[(ds.delta[grp_rows] == 1) & ~struct]
                if cm.coef.get(key) is None or len(model_rows) == 0:
                    continue
                xmat = design_matrix(ds, cm.feature_names, model_rows)
                raw = expit(xmat @ cm.coef[key])
                in_stratum = np.isin(model_rows, rows)
                mrows = model_rows[in_stratum]
                kappa = (raw * (1.0 - raw))[in_stratum]
                pos_map = pos_maps[k - 1]
                pos = np.array([pos_map[int(r_)] for r_ in mrows], dtype=int)
                w_d = -(ds.r[mrows] / pi_sq[mrows]) * kappa
                contrib = w_d[:, None] * mart_u[pos]
                d_num.setdefault(key, np.zeros((p, cm.n_features)))
                d_num[key] += contrib.T @ xmat[in_stratum]

        if correct_psi:
            for key, num in d_num.items():
                if info.get(key) is None:
                    continue
                n_g = len(_group_rows(ds, key, cm.pooled))
                d_mat = num / n_g
                try:
                    corr = (d_mat @ np.linalg.solve(info[key], s_psi.T)).T
                except np.linalg.LinAlgError as exc:
                    raise NumericalError(
                        "singular completeness information matrix in variance "
                        f"correction (group {key})"
                    ) from exc
                grp_rows = _group_rows(ds, key, cm.pooled)
                resid[grp_rows, j - 1] += corr[grp_rows]
    return resid


def sandwich_cc(ds, fit):
    """Robust sandwich for the complete-case fit."""
    if fit.method != "cc":
        raise ConfigError("sandwich_cc requires a complete-case fit")
    views = build_views(ds)
    pi = np.ones(ds.n)
    bread = [
        _bread(ds, views, j, "cc", pi, None, fit.beta[j - 1])
        for j in range(1, ds.n_causes + 1)
    ]
    resid = _weighted_residuals(
        ds, views, fit, pi, event_w=ds.r.astype(float), correct_psi=False
    )
    return _assemble(ds, fit, bread, resid)


def sandwich_ipw(ds, fit, ipw_weight_mode="first-order"):
    """Sandwich for the inverse-probability-weighted fit.

    Includes the correction for the estimated completeness model. The
    event weight follows ``ipw_weight_mode`` (see module docstring).
    """
    if fit.method != "ipw":
        raise ConfigError("sandwich_ipw requires an inverse-weighted fit")
    if ipw_weight_mode not in IPW_WEIGHT_MODES:
        raise ConfigError(
            f"ipw_weight_mode must be one of {IPW_WEIGHT_MODES}"
        )
    views = build_views(ds)
    pi, _ = _nuisance_arrays(ds, "ipw", fit.completeness, None)
    bread = [
        _bread(ds, views, j, "ipw", pi, None, fit.beta[j - 1])
        for j in range(1, ds.n_causes + 1)
    ]
    if ipw_weight_mode == "as-printed":
        event_w = ds.r / (pi * pi)
    else:
        event_w = ds.r / pi
    resid = _weighted_residuals(
        ds, views, fit, pi, event_w=event_w, correct_psi=True, mode=ipw_weight_mode
    )
    return _assemble(ds, fit, bread, resid, mode=ipw_weight_mode)


def _aipw_residuals(ds, views, fit, pi, rho):
    """Residuals for the augmented estimator (unit risk weights)."""
    n, p, J = ds.n, ds.n_covariates, ds.n_causes
    resid = np.zeros((n, J, p))
    for j in range(1, J + 1):
        beta = fit.beta[j - 1]
        ez_all = np.exp(ds.z @ beta)
        for view in views:
            caches = _stratum_caches(ds, view, j, "aipw", pi, rho, beta)
            rows = view.rows
            if caches is None:
                continue
            masses = _event_masses(ds, view, j, "aipw", pi, rho)
            mass_by_pos = np.zeros(view.size)
            mass_by_pos[view.fail_pos] = masses
            zc_event = np.where(
                (mass_by_pos != 0.0)[:, None],
                ds.z[rows] - caches["mean_u_own"],
                0.0,
            )
            ev_term = mass_by_pos[:, None] * zc_event
            comp = ez_all[rows, None] * (
                ds.z[rows] * caches["lam_at"][:, None] - caches["g1u_at"]
            )
            resid[rows, j - 1] = ev_term - comp
    return resid


def sandwich_aipw(ds, fit):
    """Sandwich for the augmented estimator (no nuisance corrections)."""
    if fit.method != "aipw":
        raise ConfigError("sandwich_aipw requires an augmented fit")
    views = build_views(ds)
    pi, rho = _nuisance_arrays(ds, "aipw", fit.completeness, fit.cause_model)
    bread = [
        _bread(ds, views, j, "aipw", pi, rho, fit.beta[j - 1])
        for j in range(1, ds.n_causes + 1)
    ]
    resid = _aipw_residuals(ds, views, fit, pi, rho)
    return _assemble(ds, fit, bread, resid)
