# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled logistic-regression kernels.

Full-data gradients run the two matrix-vector products through BLAS ``dgemv``
with the sigmoid weights computed in between, in C. Minibatch gradients make a
single fused pass over the selected rows, which beats gathering them for
small batches. An index set covering every row in order takes the full path,
so the two agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p
from libc.stdlib cimport free, malloc
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()


cdef inline double _neg_sigmoid(double t) noexcept nogil:
    # sigma(-t) = 1 / (1 + e^t), evaluated without overflow
    cdef double e
    if t >= 0:
        e = exp(-t)
        return e / (1.0 + e)
    return 1.0 / (1.0 + exp(t))


cdef inline double _softplus_neg(double t) noexcept nogil:
    # log(1 + e^{-t})
    if t >= 0:
        return log1p(exp(-t))
    return -t + log1p(exp(t))


cdef inline double _dot(const double* a, const double* w, Py_ssize_t m) noexcept nogil:
    # four independent partial sums break the add dependency chain
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t c = 0
    while c + 4 <= m:
        s0 += a[c] * w[c]
        s1 += a[c + 1] * w[c + 1]
        s2 += a[c + 2] * w[c + 2]
        s3 += a[c + 3] * w[c + 3]
        c += 4
    while c < m:
        s0 += a[c] * w[c]
        c += 1
    return (s0 + s1) + (s2 + s3)


cdef inline void _axpy(double coef, const double* a, double* g, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t c
    for c in range(m):
        g[c] += coef * a[c]


cdef bint _is_all_rows(const cnp.intp_t[::1] idx, Py_ssize_t s) noexcept nogil:
    cdef Py_ssize_t j
    if idx.shape[0] != s:
        return False
    for j in range(s):
        if idx[j] != j:
            return False
    return True


cdef int _grad_full(const double* A, const double* y, const double* w, double lam,
                    int s, int m, double* g) noexcept nogil:
    # row-major A (s x m) is column-major A^T (m x s) with leading dimension m
    cdef char trans_t = b"T", trans_n = b"N"
    cdef int one = 1
    cdef double d_one = 1.0, d_zero = 0.0, inv_s = 1.0 / s
    cdef double* z = <double*> malloc(s * sizeof(double))
    cdef Py_ssize_t j, c
    if z == NULL:
        return -1
    dgemv(&trans_t, &m, &s, &d_one, <double*> A, &m, <double*> w, &one, &d_zero, z, &one)
    for j in range(s):
        z[j] = -y[j] * _neg_sigmoid(y[j] * z[j])
    dgemv(&trans_n, &m, &s, &inv_s, <double*> A, &m, z, &one, &d_zero, g, &one)
    for c in range(m):
        g[c] += lam * w[c]
    free(z)
    return 0


def logistic_grad(const double[:, ::1] A, const double[::1] y, const double[::1] w,
                  double lam, const cnp.intp_t[::1] idx=None):
    cdef Py_ssize_t s = A.shape[0], m = A.shape[1]
    cdef Py_ssize_t b = s if idx is None else idx.shape[0]
    cdef Py_ssize_t jj, j, c
    cdef double z, coef
    cdef const double* base = &A[0, 0]
    cdef const double* wp = &w[0]
    cdef const double* row
    cdef int status = 0
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] gv = out
    cdef double* g = &gv[0]
    with nogil:
        if idx is None or _is_all_rows(idx, s):
            status = _grad_full(base, &y[0], wp, lam, <int> s, <int> m, g)
        else:
            for jj in range(b):
                j = idx[jj]
                row = base + j * m
                z = _dot(row, wp, m)
                coef = -y[j] * _neg_sigmoid(y[j] * z)
                _axpy(coef, row, g, m)
            for c in range(m):
                g[c] = g[c] / b + lam * wp[c]
    if status != 0:
        raise MemoryError()
    return out


def logistic_loss(const double[:, ::1] A, const double[::1] y, const double[::1] w,
                  double lam):
    cdef Py_ssize_t s = A.shape[0], m = A.shape[1]
    cdef Py_ssize_t j
    cdef double acc = 0.0
    cdef const double* base = &A[0, 0]
    cdef const double* wp = &w[0]
    with nogil:
        for j in range(s):
            acc += _softplus_neg(y[j] * _dot(base + j * m, wp, m))
    return acc / s + 0.5 * lam * _dot(wp, wp, m)
