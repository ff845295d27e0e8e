"""Lattice recursion kernels: compiled extension with a pure fallback.

The compiled module is preferred when importable; set the environment
variable ``GRADMASK_PURE_KERNEL=1`` to force the fallback (used by the
benchmark and by the backend-equivalence tests). `BACKEND` names the
implementation actually in use.
"""

import os

if os.environ.get("GRADMASK_PURE_KERNEL"):
    from .pure import forward_backward

    BACKEND = "pure"
else:
    try:
        from ._rnnt import forward_backward

        BACKEND = "cython"
    except ImportError:  # extension not built on this install
        from .pure import forward_backward

        BACKEND = "pure"

__all__ = ["forward_backward", "BACKEND"]
