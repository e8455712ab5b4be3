"""NumPy implementations of the per-stratum risk-set accumulation kernels.

Conventions shared by both backends:

* records are pre-sorted by descending observed time, so the risk set at an
  event time is a prefix of the arrays;
* ``cuts[e]`` is the size of that prefix for event ``e`` (its own record
  included), and ``ev_pos[e]`` is the event record's row index;
* risk weights multiply ``exp(z @ beta)`` inside every risk-set sum, event
  masses weight the per-event contributions (they may be negative for
  augmented scores).

All sums here are unnormalized: callers divide by stratum size where a
normalized quantity is needed.
"""

import numpy as np


def score_curvature(z, risk_w, beta, ev_pos, cuts, ev_mass):
    """Accumulate the weighted score and curvature over a stratum's events.

    Returns ``(score, curvature, min_denom)`` where ``score`` is
    ``sum_e mass_e * (z_e - zbar(t_e))``, ``curvature`` is
    ``sum_e mass_e * (S2/S0 - zbar zbar')(t_e)`` and ``min_denom`` is the
    smallest risk-set denominator seen (guards division blowups upstream).
    """
    p = z.shape[1]
    if len(ev_pos) == 0:
        return np.zeros(p), np.zeros((p, p)), np.inf

    e = risk_w * np.exp(z @ beta)
    ez = e[:, None] * z
    c0 = np.cumsum(e)[cuts - 1]
    c1 = np.cumsum(ez, axis=0)[cuts - 1]
    c2 = np.cumsum(ez[:, :, None] * z[:, None, :], axis=0)[cuts - 1]

    zbar = c1 / c0[:, None]
    score = ev_mass @ (z[ev_pos] - zbar)
    curv = np.einsum("e,eij->ij", ev_mass, c2 / c0[:, None, None])
    curv -= np.einsum("e,ei,ej->ij", ev_mass, zbar, zbar)
    return score, curv, float(c0.min())


def risk_means(z, risk_w, beta, cuts):
    """Risk-set denominators and weighted covariate means at given cuts.

    ``cuts`` indexes prefix sizes (typically one per distinct event time).
    Returns ``(denoms, means)`` with shapes ``(d,)`` and ``(d, p)``.
    """
    if len(cuts) == 0:
        p = z.shape[1]
        return np.empty(0), np.empty((0, p))
    e = risk_w * np.exp(z @ beta)
    c0 = np.cumsum(e)[cuts - 1]
    c1 = np.cumsum(e[:, None] * z, axis=0)[cuts - 1]
    return c0, c1 / c0[:, None]
