# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled particle/grid transfer kernels: bump deposition and multilinear gather."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, ceil

cnp.import_array()


def deposit_bump(const double[:, ::1] pos, double beta, double half_length, int n, double scale):
    """Sum of scale * exp(-1/(1-|x_j - X_i|^2/beta^2)) over particles, at every node.

    Returns a flat array of length n**d in row-major node order; stencils wrap
    periodically.
    """
    cdef Py_ssize_t npart = pos.shape[0]
    cdef int d = <int>pos.shape[1]
    cdef double h = 2.0 * half_length / n
    cdef double inv_b2 = 1.0 / (beta * beta)
    cdef Py_ssize_t total = 1
    cdef int a
    for a in range(d):
        total *= n
    out = np.zeros(total, dtype=np.float64)
    cdef double[::1] g = out
    cdef int lo[3]
    cdef int hi[3]
    cdef int idx[3]
    cdef double dx2[3][64]
    cdef Py_ssize_t i, flat
    cdef int j, m, width, empty
    cdef double x, r2, q
    if d > 3:
        raise ValueError("dimension must be <= 3")
    width = <int>ceil(2.0 * beta / h) + 2
    if width > 64:
        raise ValueError("mollifier stencil wider than 64 nodes per axis")
    with nogil:
        for i in range(npart):
            for a in range(d):
                x = pos[i, a] + half_length
                lo[a] = <int>ceil((x - beta) / h)
                hi[a] = <int>floor((x + beta) / h)
                for m in range(hi[a] - lo[a] + 1):
                    q = (lo[a] + m) * h - x
                    dx2[a][m] = q * q
                idx[a] = lo[a]
            empty = 0
            for a in range(d):
                if hi[a] < lo[a]:
                    empty = 1
            if empty:
                continue
            # odometer over the stencil box
            while True:
                r2 = 0.0
                for a in range(d):
                    r2 += dx2[a][idx[a] - lo[a]]
                r2 *= inv_b2
                if r2 < 1.0:
                    flat = 0
                    for a in range(d):
                        j = idx[a] % n
                        if j < 0:
                            j += n
                        flat = flat * n + j
                    g[flat] += scale * exp(-1.0 / (1.0 - r2))
                a = d - 1
                while a >= 0:
                    idx[a] += 1
                    if idx[a] <= hi[a]:
                        break
                    idx[a] = lo[a]
                    a -= 1
                if a < 0:
                    break
    return out


def gather_linear(const double[::1] field, int n, double half_length, const double[:, ::1] pos):
    """Multilinear interpolation of a periodic nodal field at particle positions."""
    cdef Py_ssize_t npart = pos.shape[0]
    cdef int d = <int>pos.shape[1]
    cdef double h = 2.0 * half_length / n
    out = np.empty(npart, dtype=np.float64)
    cdef double[::1] res = out
    cdef int base[3]
    cdef double frac[3]
    cdef Py_ssize_t i, flat
    cdef int a, corner, bit, j
    cdef double u, w, acc
    if d > 3:
        raise ValueError("dimension must be <= 3")
    with nogil:
        for i in range(npart):
            for a in range(d):
                u = (pos[i, a] + half_length) / h
                base[a] = <int>floor(u)
                frac[a] = u - base[a]
            acc = 0.0
            for corner in range(1 << d):
                w = 1.0
                flat = 0
                for a in range(d):
                    bit = (corner >> (d - 1 - a)) & 1
                    if bit:
                        w *= frac[a]
                    else:
                        w *= 1.0 - frac[a]
                    j = (base[a] + bit) % n
                    if j < 0:
                        j += n
                    flat = flat * n + j
                acc += w * field[flat]
            res[i] = acc
    return out
