"""Randomized-response baseline over the full unordered pair space.

Each of the N(N-1)/2 potential relations has its membership bit flipped
independently with probability p = 1/(1 + e^eps), which makes the released
relation set eps-DP on its own. The quadratic pair enumeration is guarded:
beyond the entity cap the caller must opt in explicitly, since small eps
densifies the output drastically.
"""

from __future__ import annotations

import math

import numpy as np

from relpriv.errors import ConfigError
from relpriv.graph import TextAttributedGraph
from relpriv.rng import stream_rng

ENTITY_GUARD = 5000


def flip_probability(epsilon: float) -> float:
    """p = 1/(1 + e^eps), computed overflow-safely."""
    if epsilon <= 0.0:
        raise ConfigError("epsilon must be positive")
    e = math.exp(-epsilon)
    return e / (1.0 + e)


def randomized_response(
    graph: TextAttributedGraph,
    epsilon: float,
    seed: int,
    *,
    max_entities: int = ENTITY_GUARD,
    force: bool = False,
) -> set:
    """Perturbed relation set over all unordered pairs; deterministic in seed."""
    n = graph.n_entities
    n_pairs = n * (n - 1) // 2
    if n > max_entities and not force:
        raise ConfigError(
            f"{n} entities means {n_pairs} candidate pairs; pass force=True "
            "to run the quadratic enumeration anyway"
        )
    p = flip_probability(epsilon)
    rng = stream_rng(seed, "rr")

    neighbors = [[] for _ in range(n)]
    for u, v in graph.relations:
        neighbors[u].append(v)

    out = set()
    for u in range(n - 1):
        width = n - u - 1
        member = np.zeros(width, dtype=bool)
        if neighbors[u]:
            member[np.asarray(neighbors[u]) - u - 1] = True
        flips = rng.random(width) < p
        kept = np.nonzero(member ^ flips)[0]
        for offset in kept:
            out.add((u, u + 1 + int(offset)))
    return out
