"""Mini-batch sampling: Poisson subsampling plus decoupled negatives.

The decoupled sampler is the load-bearing piece of the privacy argument.
A relation's inclusion decision and its negatives depend only on
(master seed, step, the relation's own endpoints), never on the rest of
the relation set or on other batch members. Removing one relation from
the training set therefore changes at most the single tuple anchored at
it, which is what lets per-tuple clipping bound the batch gradient's
sensitivity.

The in-batch sampler here exists only as a diagnostic and for the
non-private baseline: it builds negatives from other positives in the
same batch, so one removal can perturb every tuple.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relpriv.errors import ConfigError
from relpriv.graph import GraphSplit, canonical_pair
from relpriv.rng import derive_seed

_SPLITMIX_C1 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_C2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= _SPLITMIX_C1
    x ^= x >> np.uint64(27)
    x *= _SPLITMIX_C2
    x ^= x >> np.uint64(31)
    return x


def inclusion_uniforms(seed: int, step: int, pairs: np.ndarray) -> np.ndarray:
    """One uniform in [0, 1) per relation, pure in (seed, step, pair).

    The per-step key is hash-derived; within a step, distinct pairs map to
    distinct mixer inputs (ids are packed into one word), so inclusion
    decisions are independent across relations and unchanged by edits to
    the rest of the relation set.
    """
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.size and pairs.max() >= (1 << 32):
        raise ConfigError("entity ids beyond 2^32 are not supported")
    key = np.uint64(derive_seed(seed, "incl", step))
    packed = (pairs[:, 0].astype(np.uint64) << np.uint64(32)) | pairs[:, 1].astype(np.uint64)
    mixed = _mix64(packed + key)
    return (mixed >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class RelationTuple:
    """One positive relation plus k decoupled negatives sharing its anchor."""

    positive: tuple  # canonical (min, max)
    anchor: int  # the lexicographically smaller endpoint
    negatives: tuple  # k distinct entity ids, none equal to an endpoint
    tuple_seed: int

    @property
    def mate(self) -> int:
        u, v = self.positive
        return v if self.anchor == u else u

    def entities(self) -> tuple:
        """Distinct entities of the tuple: anchor, mate, then negatives."""
        return (self.anchor, self.mate) + self.negatives


@dataclass(frozen=True)
class Batch:
    step: int
    tuples: tuple
    sampling_ratio: float


def sample_negatives_decoupled(
    positive: tuple,
    k: int,
    n_entities: int,
    tuple_seed: int,
) -> tuple:
    """k distinct negative entities for one positive, from its seed alone.

    Reads nothing but (positive, k, n_entities, tuple_seed); in particular
    it never consults the relation set, so sampled negatives may coincide
    with true relations. Draws are without replacement, uniform over the
    entity set minus the positive's endpoints.
    """
    if k < 1:
        raise ConfigError("need at least one negative per tuple")
    if n_entities < k + 2:
        raise ConfigError(
            f"cannot draw {k} distinct negatives from {n_entities} entities "
            "excluding both endpoints"
        )
    lo, hi = canonical_pair(*positive)
    rng = np.random.default_rng(tuple_seed)
    draws = rng.choice(n_entities - 2, size=k, replace=False).astype(np.int64)
    draws = draws + (draws >= lo)
    draws = draws + (draws >= hi)
    return tuple(int(v) for v in draws)


def tuple_seed_for(seed: int, step: int, positive: tuple) -> int:
    """Per-tuple seed: a pure function of (seed, step, canonical pair)."""
    lo, hi = canonical_pair(*positive)
    return derive_seed(seed, "neg", step, lo, hi)


def sample_batch(
    split: GraphSplit,
    step: int,
    expected_batch: int,
    k: int,
    seed: int,
    *,
    sampling_ratio: float | None = None,
) -> Batch:
    """Poisson-subsample positives and attach decoupled negatives.

    Each train relation is included independently with probability
    q = expected_batch / |train|; an empty batch is a valid outcome.
    Deterministic in (seed, step), relation by relation.

    sampling_ratio pins q explicitly. The privacy analysis treats q as a
    mechanism constant, so comparisons across adjacent relation sets must
    hold q fixed rather than let the denominator shift by one.
    """
    n_train = len(split.train_relations)
    if n_train == 0:
        raise ConfigError("empty train relation set")
    if not 1 <= expected_batch <= n_train:
        raise ConfigError(
            f"expected batch {expected_batch} must lie in [1, {n_train}]"
        )
    if split.n_entities < k + 2:
        raise ConfigError("entity set too small for the requested negatives")

    q = expected_batch / n_train if sampling_ratio is None else sampling_ratio
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"sampling ratio {q} must lie in (0, 1]")
    pairs = np.asarray(split.train_relations, dtype=np.int64).reshape(n_train, 2)
    included = np.nonzero(inclusion_uniforms(seed, step, pairs) < q)[0]
    tuples = []
    for idx in included:
        rel = (int(pairs[idx, 0]), int(pairs[idx, 1]))
        tseed = tuple_seed_for(seed, step, rel)
        negatives = sample_negatives_decoupled(rel, k, split.n_entities, tseed)
        tuples.append(
            RelationTuple(positive=rel, anchor=rel[0], negatives=negatives, tuple_seed=tseed)
        )
    return Batch(step=step, tuples=tuple(tuples), sampling_ratio=q)


def sample_negatives_inbatch(batch_positives) -> dict:
    """Diagnostic in-batch negatives: entities of the other positives.

    Couples the tuples of a batch together, which is exactly the failure
    mode the decoupled sampler avoids; never use this on a private path.
    """
    positives = [canonical_pair(*p) for p in batch_positives]
    if len(positives) < 2:
        raise ConfigError("in-batch negatives need at least two positives")
    out = {}
    for i, (u, v) in enumerate(positives):
        seen = []
        for j, other in enumerate(positives):
            if j == i:
                continue
            for ent in other:
                if ent not in (u, v) and ent not in seen:
                    seen.append(ent)
        out[i] = tuple(seen)
    return out
