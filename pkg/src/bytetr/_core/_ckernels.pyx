# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled edge kernels for GGNN message passing.

Accumulation order is edge order, matching the numpy fallback bit for bit
when built without floating-point contraction.
"""
from libc.stdint cimport int64_t


def scatter_rows(double[:, ::1] out, const double[:, ::1] x,
                 const int64_t[::1] src, const int64_t[::1] dst,
                 const double[:, ::1] coef):
    """out[dst[e]] += coef[e] * x[src[e]] for every edge e, in order.

    ``coef`` is [E, 1] (one scale per edge) or [E, D] (per-feature scale).
    """
    cdef Py_ssize_t n_edges = src.shape[0]
    cdef Py_ssize_t width = x.shape[1]
    cdef bint per_feature = coef.shape[1] != 1
    cdef Py_ssize_t e, k, s, t
    cdef double c
    with nogil:
        for e in range(n_edges):
            s = src[e]
            t = dst[e]
            if per_feature:
                for k in range(width):
                    out[t, k] += coef[e, k] * x[s, k]
            else:
                c = coef[e, 0]
                for k in range(width):
                    out[t, k] += c * x[s, k]


def edge_products(const double[:, ::1] a, const double[:, ::1] b,
                  const int64_t[::1] ia, const int64_t[::1] ib,
                  double[:, ::1] out):
    """out[e] = a[ia[e]] . b[ib[e]] (out [E, 1]) or elementwise product (out [E, D])."""
    cdef Py_ssize_t n_edges = ia.shape[0]
    cdef Py_ssize_t width = a.shape[1]
    cdef bint per_feature = out.shape[1] != 1
    cdef Py_ssize_t e, k, s, t
    cdef double acc
    with nogil:
        for e in range(n_edges):
            s = ia[e]
            t = ib[e]
            if per_feature:
                for k in range(width):
                    out[e, k] = a[s, k] * b[t, k]
            else:
                acc = 0.0
                for k in range(width):
                    acc = acc + a[s, k] * b[t, k]
                out[e, 0] = acc
