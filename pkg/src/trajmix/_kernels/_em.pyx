"""Compiled EM pass for the Gaussian trajectory mixture."""
import numpy as np

from libc.math cimport exp, log, INFINITY, M_PI


def em_pass(const double[:, ::1] y, const double[:, ::1] m, const double[:, ::1] mu,
            const double[::1] sigma, const double[::1] log_pi):
    cdef Py_ssize_t N = y.shape[0]
    cdef Py_ssize_t T = y.shape[1]
    cdef Py_ssize_t K = mu.shape[0]
    cdef Py_ssize_t i, k, t
    cdef double ll = 0.0, nobs, ss, d, amax, tot, wk, yv

    W = np.empty((N, K), dtype=np.float64)
    S = np.zeros((K, T), dtype=np.float64)
    R = np.zeros((K, T), dtype=np.float64)
    Q = np.zeros((K, T), dtype=np.float64)
    cdef double[:, ::1] w = W
    cdef double[:, ::1] s = S
    cdef double[:, ::1] r = R
    cdef double[:, ::1] q = Q
    cdef double[::1] a = np.empty(K, dtype=np.float64)
    cdef double[::1] inv_var = np.empty(K, dtype=np.float64)
    cdef double[::1] log_norm = np.empty(K, dtype=np.float64)

    for k in range(K):
        inv_var[k] = 1.0 / (sigma[k] * sigma[k])
        log_norm[k] = log(2.0 * M_PI * sigma[k] * sigma[k])

    with nogil:
        for i in range(N):
            nobs = 0.0
            for t in range(T):
                nobs = nobs + m[i, t]
            amax = -INFINITY
            for k in range(K):
                ss = 0.0
                for t in range(T):
                    if m[i, t] != 0.0:
                        d = y[i, t] - mu[k, t]
                        ss = ss + d * d
                a[k] = log_pi[k] - 0.5 * (nobs * log_norm[k] + ss * inv_var[k])
                if a[k] > amax:
                    amax = a[k]
            tot = 0.0
            for k in range(K):
                wk = exp(a[k] - amax)
                w[i, k] = wk
                tot = tot + wk
            ll = ll + amax + log(tot)
            for k in range(K):
                wk = w[i, k] / tot
                w[i, k] = wk
                for t in range(T):
                    if m[i, t] != 0.0:
                        yv = y[i, t]
                        s[k, t] = s[k, t] + wk
                        r[k, t] = r[k, t] + wk * yv
                        q[k, t] = q[k, t] + wk * yv * yv
    return ll, W, S, R, Q


def log_joint(const double[:, ::1] y, const double[:, ::1] m, const double[:, ::1] mu,
              const double[::1] sigma, const double[::1] log_pi):
    cdef Py_ssize_t N = y.shape[0]
    cdef Py_ssize_t T = y.shape[1]
    cdef Py_ssize_t K = mu.shape[0]
    cdef Py_ssize_t i, k, t
    cdef double nobs, ss, d
    out = np.empty((N, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] inv_var = np.empty(K, dtype=np.float64)
    cdef double[::1] log_norm = np.empty(K, dtype=np.float64)
    for k in range(K):
        inv_var[k] = 1.0 / (sigma[k] * sigma[k])
        log_norm[k] = log(2.0 * M_PI * sigma[k] * sigma[k])
    with nogil:
        for i in range(N):
            nobs = 0.0
            for t in range(T):
                nobs = nobs + m[i, t]
            for k in range(K):
                ss = 0.0
                for t in range(T):
                    if m[i, t] != 0.0:
                        d = y[i, t] - mu[k, t]
                        ss = ss + d * d
                o[i, k] = log_pi[k] - 0.5 * (nobs * log_norm[k] + ss * inv_var[k])
    return out
