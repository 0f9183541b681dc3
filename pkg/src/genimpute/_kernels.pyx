# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_kernels_py`` function for function."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _fnv_word(uint64_t h, uint64_t w) nogil:
    cdef int b
    for b in range(8):
        h ^= (w >> (8 * b)) & 0xFF
        h *= FNV_PRIME
    return h


def fnv1a_rows(q, salt):
    cdef cnp.int64_t[:, ::1] qv = np.ascontiguousarray(q, dtype=np.int64)
    cdef Py_ssize_t n = qv.shape[0], d = qv.shape[1], i, j
    cdef uint64_t s = <uint64_t>int(salt)
    out = np.empty(n, dtype=np.uint64)
    cdef cnp.uint64_t[::1] ov = out
    cdef uint64_t h
    with nogil:
        for i in range(n):
            h = _fnv_word(FNV_OFFSET, s)
            for j in range(d):
                h = _fnv_word(h, <uint64_t>qv[i, j])
            ov[i] = h
    return out


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t _splitmix(uint64_t *x) nogil:
    x[0] += 0x9E3779B97F4A7C15ULL
    cdef uint64_t z = x[0]
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def uniform_rows(seeds, Py_ssize_t d):
    cdef cnp.uint64_t[::1] sv = np.ascontiguousarray(seeds, dtype=np.uint64).ravel()
    cdef Py_ssize_t n = sv.shape[0], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef uint64_t x, s0, s1, s2, s3, r, t
    cdef double scale = 1.0 / 9007199254740992.0
    with nogil:
        for i in range(n):
            x = sv[i]
            s0 = _splitmix(&x)
            s1 = _splitmix(&x)
            s2 = _splitmix(&x)
            s3 = _splitmix(&x)
            for j in range(d):
                r = _rotl(s1 * 5, 7) * 9
                t = s1 << 17
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = _rotl(s3, 45)
                ov[i, j] = <double>(r >> 11) * scale
    return out


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long t):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double c1 = 1.0 - beta1, c2 = 1.0 - beta2, mhat, vhat
    with nogil:
        for i in range(n):
            m[i] = m[i] * beta1 + c1 * g[i]
            v[i] = v[i] * beta2 + c2 * g[i] * g[i]
            mhat = m[i] / bc1
            vhat = v[i] / bc2
            p[i] -= lr * mhat / (sqrt(vhat) + eps)


def bn_forward_train(x, double[::1] gamma, double[::1] beta, double eps):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j
    y = np.empty((n, d))
    xhat = np.empty((n, d))
    mean = np.zeros(d)
    var = np.zeros(d)
    inv_std = np.empty(d)
    cdef double[:, ::1] yv = y, hv = xhat
    cdef double[::1] mv = mean, vv = var, iv = inv_std
    cdef double c
    with nogil:
        for i in range(n):
            for j in range(d):
                mv[j] += xv[i, j]
        for j in range(d):
            mv[j] /= n
        for i in range(n):
            for j in range(d):
                c = xv[i, j] - mv[j]
                vv[j] += c * c
        for j in range(d):
            vv[j] /= n
            iv[j] = 1.0 / sqrt(vv[j] + eps)
        for i in range(n):
            for j in range(d):
                hv[i, j] = (xv[i, j] - mv[j]) * iv[j]
                yv[i, j] = hv[i, j] * gamma[j] + beta[j]
    return y, xhat, mean, var, inv_std


def bn_backward(g, xhat, double[::1] gamma, double[::1] inv_std,
                double[::1] dgamma, double[::1] dbeta):
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef Py_ssize_t n = gv.shape[0], d = gv.shape[1], i, j
    dx = np.empty((n, d))
    cdef double[:, ::1] dv = dx
    cdef double k
    with nogil:
        for j in range(d):
            dgamma[j] = 0.0
            dbeta[j] = 0.0
        for i in range(n):
            for j in range(d):
                dbeta[j] += gv[i, j]
                dgamma[j] += gv[i, j] * hv[i, j]
        for i in range(n):
            for j in range(d):
                k = gamma[j] * inv_std[j] / n
                dv[i, j] = k * (n * gv[i, j] - dbeta[j] - hv[i, j] * dgamma[j])
    return dx
