"""Timing comparison of the two lattice-kernel backends.

Runs the log-domain forward-backward sweep over a spread of lattice sizes
with both the compiled extension (when importable) and the pure-Python
fallback, prints per-sweep timings and the speedup, and asserts bitwise
agreement between the two. Invoke as:

    python benchmarks/bench_lattice.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np


def normalized_lattice(rng, T: int, U: int, K: int) -> np.ndarray:
    raw = rng.normal(size=(T, U + 1, K + 1))
    return raw - np.log(np.exp(raw).sum(axis=2, keepdims=True))


def bench_backend(forward_backward, cases, repeats: int) -> float:
    # warm-up pass keeps one-time costs out of the timing
    for values, targets, blank in cases:
        forward_backward(values, targets, blank)
    t0 = time.perf_counter()
    for _ in range(repeats):
        for values, targets, blank in cases:
            forward_backward(values, targets, blank)
    return (time.perf_counter() - t0) / repeats


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    from gradmask.kernel import BACKEND, pure

    rng = np.random.default_rng(0)
    shapes = [(8, 4, 16), (30, 8, 16), (60, 12, 16), (120, 24, 32)]
    cases = []
    for T, U, K in shapes:
        values = normalized_lattice(rng, T, U, K)
        targets = rng.integers(0, K, size=U).astype(np.int64)
        cases.append((values, targets, K))

    print(f"selected backend: {BACKEND}")
    print(f"shapes (T, U+1, K+1): {[v.shape for v, _, _ in cases]}")

    pure_s = bench_backend(pure.forward_backward, cases, args.repeats)
    print(f"pure python : {pure_s * 1e3:8.2f} ms per sweep")

    try:
        from gradmask.kernel import _rnnt
    except ImportError:
        print("compiled    : not built (pip install rebuilds it); nothing to compare")
        return 0
    comp_s = bench_backend(_rnnt.forward_backward, cases, args.repeats)
    print(f"compiled    : {comp_s * 1e3:8.2f} ms per sweep")
    print(f"speedup     : {pure_s / comp_s:8.1f}x")

    # both backends must agree bitwise on every case
    for values, targets, blank in cases:
        a = pure.forward_backward(values, targets, blank)
        b = _rnnt.forward_backward(values, targets, blank)
        for x, y in zip(a, b):
            assert np.array_equal(np.asarray(x), np.asarray(y)), "backend mismatch"
    print("bitwise agreement: ok")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
