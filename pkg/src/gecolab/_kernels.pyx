# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fixed-point kernels; same contract as ``_kernels_py``."""
import numpy as np
from libc.math cimport exp, log


cdef void _dist_into(const double[:, ::1] X, const double[:, ::1] psi,
                     double[:, ::1] d2) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0], A = psi.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, b, k
    cdef double acc, diff
    for i in range(n):
        for b in range(A):
            acc = 0.0
            for k in range(d):
                diff = X[i, k] - psi[b, k]
                acc = acc + diff * diff
            d2[i, b] = acc


def sq_distances(const double[:, ::1] X, const double[:, ::1] psi):
    out = np.empty((X.shape[0], psi.shape[0]))
    cdef double[:, ::1] d2 = out
    with nogil:
        _dist_into(X, psi, d2)
    return out


def posterior(const double[:, ::1] X, const double[:, ::1] psi,
              const double[::1] prior, double beta):
    cdef Py_ssize_t n = X.shape[0], A = psi.shape[0]
    cdef Py_ssize_t i, b
    cdef double rowmax, c, inv_c
    cdef double scale = -0.5 / beta
    M = np.empty((n, A))
    cdef double[:, ::1] Mv = M
    with nogil:
        _dist_into(X, psi, Mv)
        for i in range(n):
            rowmax = -1e308
            for b in range(A):
                Mv[i, b] = Mv[i, b] * scale
                if Mv[i, b] > rowmax:
                    rowmax = Mv[i, b]
            c = 0.0
            for b in range(A):
                Mv[i, b] = exp(Mv[i, b] - rowmax)
                c = c + Mv[i, b] * prior[b]
            inv_c = 1.0 / c
            for b in range(A):
                Mv[i, b] = Mv[i, b] * inv_c
    return M


def centroids(const double[:, ::1] M, const double[:, ::1] X, previous):
    cdef Py_ssize_t n = X.shape[0], A = M.shape[1], d = X.shape[1]
    cdef Py_ssize_t i, b, k
    cdef double w
    out = np.array(previous, dtype=np.float64, order="C", copy=True)
    num = np.zeros((A, d))
    colmass = np.zeros(A)
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] nv = num
    cdef double[::1] cv = colmass
    with nogil:
        # row-major sweep over M
        for i in range(n):
            for b in range(A):
                w = M[i, b]
                cv[b] = cv[b] + w
                for k in range(d):
                    nv[b, k] = nv[b, k] + w * X[i, k]
        for b in range(A):
            # zero-mass columns keep their previous value
            if cv[b] > 0.0:
                for k in range(d):
                    ov[b, k] = nv[b, k] / cv[b]
    return out, colmass


def fixed_point_map(const double[:, ::1] X, const double[:, ::1] psi,
                    const double[::1] prior, double beta):
    cdef Py_ssize_t n = X.shape[0], A = psi.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, b, k
    cdef double rowmax, c, inv_c, logc, w
    cdef double scale = -0.5 / beta
    M = np.empty((n, A))
    logm = np.empty((n, A))
    out = np.zeros((A, d))
    colmass = np.zeros(A)
    colmax = np.full(A, -np.inf)
    wsum = np.zeros(A)
    cdef double[:, ::1] Mv = M
    cdef double[:, ::1] Lv = logm
    cdef double[:, ::1] ov = out
    cdef double[::1] cv = colmass
    cdef double[::1] cm = colmax
    cdef double[::1] ws = wsum
    with nogil:
        _dist_into(X, psi, Lv)
        for i in range(n):
            rowmax = -1e308
            for b in range(A):
                Lv[i, b] = Lv[i, b] * scale
                if Lv[i, b] > rowmax:
                    rowmax = Lv[i, b]
            c = 0.0
            for b in range(A):
                Lv[i, b] = Lv[i, b] - rowmax
                Mv[i, b] = exp(Lv[i, b])
                c = c + Mv[i, b] * prior[b]
            inv_c = 1.0 / c
            logc = log(c)
            for b in range(A):
                Mv[i, b] = Mv[i, b] * inv_c
                Lv[i, b] = Lv[i, b] - logc
                cv[b] = cv[b] + Mv[i, b]
                if Lv[i, b] > cm[b]:
                    cm[b] = Lv[i, b]
        # columns are normalised in the log domain so underflowed cells still move
        for i in range(n):
            for b in range(A):
                w = exp(Lv[i, b] - cm[b])
                ws[b] = ws[b] + w
                for k in range(d):
                    ov[b, k] = ov[b, k] + w * X[i, k]
        for b in range(A):
            for k in range(d):
                ov[b, k] = ov[b, k] / ws[b]
    return M, out, colmass
