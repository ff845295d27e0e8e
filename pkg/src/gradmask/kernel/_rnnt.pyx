# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled transducer-lattice recursions; mirrors kernel/pure.py."""

from libc.math cimport exp, log1p, INFINITY

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _lse2(double x, double y) noexcept nogil:
    cdef double big, small
    if x >= y:
        big = x
        small = y
    else:
        big = y
        small = x
    if big == -INFINITY:
        return big
    return big + log1p(exp(small - big))


def forward_backward(double[:, :, ::1] log_probs, cnp.int64_t[::1] targets, Py_ssize_t blank):
    """Log-domain forward/backward; returns (loss, alpha, beta)."""
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t U1 = log_probs.shape[1]
    cdef Py_ssize_t U = U1 - 1
    cdef Py_ssize_t t, u

    alpha_arr = np.empty((T, U1), dtype=np.float64)
    beta_arr = np.empty((T, U1), dtype=np.float64)
    cdef double[:, ::1] a = alpha_arr
    cdef double[:, ::1] b = beta_arr
    cdef double loss

    with nogil:
        a[0, 0] = 0.0
        for u in range(1, U1):
            a[0, u] = a[0, u - 1] + log_probs[0, u - 1, targets[u - 1]]
        for t in range(1, T):
            a[t, 0] = a[t - 1, 0] + log_probs[t - 1, 0, blank]
            for u in range(1, U1):
                a[t, u] = _lse2(
                    a[t - 1, u] + log_probs[t - 1, u, blank],
                    a[t, u - 1] + log_probs[t, u - 1, targets[u - 1]],
                )

        b[T - 1, U] = log_probs[T - 1, U, blank]
        for u in range(U - 1, -1, -1):
            b[T - 1, u] = log_probs[T - 1, u, targets[u]] + b[T - 1, u + 1]
        for t in range(T - 2, -1, -1):
            b[t, U] = log_probs[t, U, blank] + b[t + 1, U]
            for u in range(U - 1, -1, -1):
                b[t, u] = _lse2(
                    log_probs[t, u, blank] + b[t + 1, u],
                    log_probs[t, u, targets[u]] + b[t, u + 1],
                )

        loss = -(a[T - 1, U] + log_probs[T - 1, U, blank])

    return loss, alpha_arr, beta_arr
