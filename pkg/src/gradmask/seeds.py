"""Named, independent random streams derived from one master seed.

Every source of randomness in the pipeline (corpus synthesis, mask
sampling, weight init, batch shuffling, label-noise injection) pulls from
its own stream so that changing one knob never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Fixed registry: stream identity must never depend on dict ordering.
STREAMS = {
    "data": 0,
    "means": 1,
    "mask": 2,
    "init": 3,
    "shuffle": 4,
    "noise": 5,
    "eval": 6,
    "chain": 7,
}


def stable_hash(text: str) -> int:
    """64-bit content hash of a string, stable across processes and runs."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for stream `name` under `seed`; `extra` ints split further.

    Built on SeedSequence spawn keys, so streams are independent and the
    mapping (seed, name, extra) -> bit stream is reproducible everywhere.
    """
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    key = (STREAMS[name],) + tuple(int(e) & 0xFFFFFFFF for e in extra)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
