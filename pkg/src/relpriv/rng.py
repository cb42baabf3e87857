"""Deterministic seed derivation for named random streams.

All randomness hangs off a single integer master seed. Substreams are
derived by hashing the master seed together with a stream name and
optional integer context (step index, relation endpoints), so any draw
can be reproduced in isolation, and removing one relation from a
training set never shifts the randomness consumed on behalf of another.

Stream names used across the package:

    "init"    parameter initialisation
    "incl"    per-relation Poisson inclusion, keyed by (step, u, v)
    "neg"     per-tuple negative sampling, keyed by (step, u, v)
    "noise"   per-step Gaussian privacy noise, keyed by step
    "split"   train/eval relation split
    "synth"   synthetic graph generation
    "rr"      randomized-response bit flips
    "eval"    evaluation batch shuffling
    "probe"   linear-probe shot selection
    "audit"   membership-audit pair sampling
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, stream: str, *context: int) -> int:
    """Collision-resistant 64-bit seed for a named substream."""
    h = hashlib.blake2b(digest_size=8)
    h.update((int(master_seed) & _MASK64).to_bytes(8, "big"))
    h.update(stream.encode("utf-8"))
    for value in context:
        h.update((int(value) & _MASK64).to_bytes(8, "big"))
    return int.from_bytes(h.digest(), "big")


def stream_rng(master_seed: int, stream: str, *context: int) -> np.random.Generator:
    """numpy Generator seeded from a named substream."""
    return np.random.default_rng(derive_seed(master_seed, stream, *context))


def uniform01(master_seed: int, stream: str, *context: int) -> float:
    """One uniform draw in [0, 1) that is a pure function of its inputs."""
    return (derive_seed(master_seed, stream, *context) >> 11) / float(1 << 53)
