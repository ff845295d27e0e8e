"""Reference transducer-lattice recursions in plain Python.

Slow fallback for the compiled kernel in `_rnnt.pyx`; both walk the grid
with the same operation order so results agree to the last bit on any
platform where they share a libm.
"""

from __future__ import annotations

import math

import numpy as np


def _lse2(x: float, y: float) -> float:
    if x >= y:
        big, small = x, y
    else:
        big, small = y, x
    if big == -math.inf:
        return big
    return big + math.log1p(math.exp(small - big))


def forward_backward(log_probs: np.ndarray, targets: np.ndarray, blank: int):
    """Log-domain forward/backward over a (T, U+1, K+1) lattice.

    Grid state (t, u) has taken t blank and u emit transitions; a blank
    moves to (t+1, u), an emit of targets[u] to (t, u+1), and the path
    terminates with the blank at (T-1, U). Returns (loss, alpha, beta)
    with loss = -ln P(targets | lattice).
    """
    T, U1, _ = log_probs.shape
    U = U1 - 1
    bl = log_probs[:, :, blank].tolist()
    if U:
        em = log_probs[:, np.arange(U), targets].tolist()
    else:
        em = [[] for _ in range(T)]

    a = [[0.0] * U1 for _ in range(T)]
    for u in range(1, U1):
        a[0][u] = a[0][u - 1] + em[0][u - 1]
    for t in range(1, T):
        a[t][0] = a[t - 1][0] + bl[t - 1][0]
        for u in range(1, U1):
            a[t][u] = _lse2(a[t - 1][u] + bl[t - 1][u], a[t][u - 1] + em[t][u - 1])

    b = [[0.0] * U1 for _ in range(T)]
    b[T - 1][U] = bl[T - 1][U]
    for u in range(U - 1, -1, -1):
        b[T - 1][u] = em[T - 1][u] + b[T - 1][u + 1]
    for t in range(T - 2, -1, -1):
        b[t][U] = bl[t][U] + b[t + 1][U]
        for u in range(U - 1, -1, -1):
            b[t][u] = _lse2(bl[t][u] + b[t + 1][u], em[t][u] + b[t][u + 1])

    loss = -(a[T - 1][U] + bl[T - 1][U])
    return loss, np.array(a), np.array(b)
