# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: MF scoring, MF gradient scatter, DR mask enumeration."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def mf_logits(const cnp.int64_t[::1] users, const cnp.int64_t[::1] items,
              const double[:, ::1] U, const double[:, ::1] V,
              const double[::1] bu, const double[::1] bi, double g):
    cdef Py_ssize_t n = users.shape[0], d = U.shape[1], k, j
    cdef cnp.int64_t u, i
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for k in range(n):
        u = users[k]
        i = items[k]
        acc = 0.0
        for j in range(d):
            acc += U[u, j] * V[i, j]
        o[k] = acc + bu[u] + bi[i] + g
    return out


def mf_scatter_grad(const cnp.int64_t[::1] users, const cnp.int64_t[::1] items,
                    const double[::1] coef,
                    const double[:, ::1] U, const double[:, ::1] V,
                    double[:, ::1] gU, double[:, ::1] gV,
                    double[::1] gbu, double[::1] gbi):
    cdef Py_ssize_t n = users.shape[0], d = U.shape[1], k, j
    cdef cnp.int64_t u, i
    cdef double c, total = 0.0
    for k in range(n):
        u = users[k]
        i = items[k]
        c = coef[k]
        for j in range(d):
            gU[u, j] += c * V[i, j]
            gV[i, j] += c * U[u, j]
        gbu[u] += c
        gbi[i] += c
        total += c
    return total


def dr_enumerate(const double[::1] e, const double[::1] ehat,
                 const double[::1] p, const double[::1] phat):
    cdef Py_ssize_t n = e.shape[0], j
    cdef long long m, n_masks = 1LL << n
    cdef double w, val, mean = 0.0, var = 0.0, base = 0.0
    corr_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] corr = corr_arr
    vals_arr = np.empty(n_masks, dtype=np.float64)
    weights_arr = np.empty(n_masks, dtype=np.float64)
    cdef double[::1] vals = vals_arr
    cdef double[::1] weights = weights_arr
    for j in range(n):
        base += ehat[j]
        corr[j] = (e[j] - ehat[j]) / phat[j]
    for m in range(n_masks):
        w = 1.0
        val = base
        for j in range(n):
            if (m >> j) & 1:
                w *= p[j]
                val += corr[j]
            else:
                w *= 1.0 - p[j]
        val /= n
        vals[m] = val
        weights[m] = w
        mean += w * val
    for m in range(n_masks):
        var += weights[m] * (vals[m] - mean) * (vals[m] - mean)
    return mean, var
