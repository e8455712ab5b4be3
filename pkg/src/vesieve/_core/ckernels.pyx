# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython twin of kernels_py: single descending pass with running sums.

Semantics must match kernels_py exactly (same inputs, same outputs up to
floating-point association order); tests assert parity to 1e-10.
"""

from libc.math cimport exp, INFINITY

import numpy as np

cimport numpy as cnp

cnp.import_array()


def score_curvature(double[:, ::1] z, double[::1] risk_w, double[::1] beta,
                    long[::1] ev_pos, long[::1] cuts, double[::1] ev_mass):
    cdef Py_ssize_t m = z.shape[0]
    cdef Py_ssize_t p = z.shape[1]
    cdef Py_ssize_t n_ev = ev_pos.shape[0]

    score_arr = np.zeros(p)
    curv_arr = np.zeros((p, p))
    cdef double[::1] score = score_arr
    cdef double[:, ::1] curv = curv_arr
    if n_ev == 0:
        return score_arr, curv_arr, INFINITY

    s1_arr = np.zeros(p)
    s2_arr = np.zeros((p, p))
    cdef double[::1] s1 = s1_arr
    cdef double[:, ::1] s2 = s2_arr
    cdef double s0 = 0.0
    cdef double min_denom = INFINITY
    cdef double eta, w, mass, zbar_a, zbar_b
    cdef Py_ssize_t r = 0, e, a, b, pos

    for e in range(n_ev):
        while r < cuts[e]:
            eta = 0.0
            for a in range(p):
                eta += z[r, a] * beta[a]
            w = risk_w[r] * exp(eta)
            s0 += w
            for a in range(p):
                s1[a] += w * z[r, a]
                for b in range(p):
                    s2[a, b] += w * z[r, a] * z[r, b]
            r += 1
        if s0 < min_denom:
            min_denom = s0
        mass = ev_mass[e]
        pos = ev_pos[e]
        for a in range(p):
            zbar_a = s1[a] / s0
            score[a] += mass * (z[pos, a] - zbar_a)
            for b in range(p):
                zbar_b = s1[b] / s0
                curv[a, b] += mass * (s2[a, b] / s0 - zbar_a * zbar_b)

    return score_arr, curv_arr, min_denom


def risk_means(double[:, ::1] z, double[::1] risk_w, double[::1] beta,
               long[::1] cuts):
    cdef Py_ssize_t p = z.shape[1]
    cdef Py_ssize_t d = cuts.shape[0]

    denom_arr = np.empty(d)
    mean_arr = np.empty((d, p))
    cdef double[::1] denom = denom_arr
    cdef double[:, ::1] mean = mean_arr
    if d == 0:
        return denom_arr, mean_arr

    s1_arr = np.zeros(p)
    cdef double[::1] s1 = s1_arr
    cdef double s0 = 0.0
    cdef double eta, w
    cdef Py_ssize_t r = 0, e, a

    for e in range(d):
        while r < cuts[e]:
            eta = 0.0
            for a in range(p):
                eta += z[r, a] * beta[a]
            w = risk_w[r] * exp(eta)
            s0 += w
            for a in range(p):
                s1[a] += w * z[r, a]
            r += 1
        denom[e] = s0
        for a in range(p):
            mean[e, a] = s1[a] / s0

    return denom_arr, mean_arr
