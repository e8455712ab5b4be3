"""Shared helpers for the test suite: random valid datasets and nuisances."""

import numpy as np

from vesieve import AnalysisDataset


def random_dataset(
    seed,
    n=160,
    n_causes=2,
    n_strata=2,
    n_covariates=2,
    missing=0.35,
    tau=1.0,
    min_cell=3,
):
    """A random valid dataset where every (stratum, cause) cell has at
    least ``min_cell`` complete events (so every model is identified)."""
    rng = np.random.default_rng(seed)
    for _ in range(200):
        x = rng.uniform(0.02, tau, n)
        delta = (rng.random(n) < 0.7).astype(int)
        x = np.where(delta == 0, np.minimum(x * 1.2, tau), x)
        v_latent = rng.integers(1, n_causes + 1, n)
        r = np.where(delta == 1, (rng.random(n) > missing).astype(int), 1)
        v = np.where((delta == 1) & (r == 1), v_latent, 0)
        z = np.column_stack(
            [(rng.random(n) < 0.5).astype(float)]
            + [rng.uniform(-1.0, 1.0, n) for _ in range(n_covariates - 1)]
        )
        stratum = rng.integers(1, n_strata + 1, n)
        a = np.where(delta == 1, rng.uniform(0.0, 1.0, n), np.nan)
        ok = all(
            np.sum((stratum == k) & (v == j)) >= min_cell
            and len(np.unique(z[(stratum == k) & (delta == 1), 0])) == 2
            for k in range(1, n_strata + 1)
            for j in range(1, n_causes + 1)
        )
        if ok:
            return AnalysisDataset(
                x=x,
                delta=delta,
                r=r,
                v=v,
                stratum=stratum,
                z=z,
                a=a,
                covariate_names=tuple(
                    ["z1"] + [f"w{i}" for i in range(1, n_covariates)]
                ),
                tau=tau,
                n_causes=n_causes,
                n_strata=n_strata,
            )
    raise AssertionError("could not build a valid random dataset")


def complete_dataset(seed, **kw):
    """Random dataset with every failure cause observed (R identically 1)."""
    ds = random_dataset(seed, missing=0.0, **kw)
    assert np.all(ds.r == 1)
    return ds


def random_nuisances(ds, seed):
    """Arbitrary valid (pi, rho) arrays for score-equation oracle checks."""
    rng = np.random.default_rng(seed)
    pi = np.ones(ds.n)
    fail = ds.delta == 1
    pi[fail] = rng.uniform(0.4, 0.95, int(fail.sum()))
    rho = rng.uniform(0.2, 1.0, (ds.n, ds.n_causes))
    rho /= rho.sum(axis=1, keepdims=True)
    rho[~fail] = 0.0
    return pi, rho


def fd_bread(ds, fit, j, h=1e-5):
    """Central finite differences of -score/n around the fitted beta."""
    from vesieve import score_aipw, score_cc, score_ipw

    p = ds.n_covariates
    cm, rm = fit.completeness, fit.cause_model
    if fit.method == "cc":
        score = lambda b: score_cc(ds, j, b)
    elif fit.method == "ipw":
        score = lambda b: score_ipw(ds, j, b, cm)
    else:
        score = lambda b: score_aipw(ds, j, b, cm, rm)
    beta = fit.beta[j - 1]
    out = np.zeros((p, p))
    for c in range(p):
        e = np.zeros(p)
        e[c] = h
        out[:, c] = -(score(beta + e) - score(beta - e)) / (2.0 * h * ds.n)
    return out
