import numpy as np
import pytest

from relpriv.graph import synth_graph, split_relations
from relpriv.perf import tune_allocator
from relpriv.sampling import RelationTuple, sample_negatives_decoupled

tune_allocator()


@pytest.fixture(scope="session")
def small_graph():
    return synth_graph(60, 3, 0.3, 0.02, 40, seed=5, max_tokens=6)


@pytest.fixture(scope="session")
def small_split(small_graph):
    return split_relations(small_graph, 0.2, seed=5)


def make_tuple(positive, k, n_entities, tuple_seed=123):
    """Standalone relation tuple with decoupled negatives for unit tests."""
    lo, hi = min(positive), max(positive)
    negatives = sample_negatives_decoupled((lo, hi), k, n_entities, tuple_seed)
    return RelationTuple(positive=(lo, hi), anchor=lo, negatives=negatives, tuple_seed=tuple_seed)


def random_tuple(rng, n_entities, k):
    """Random positive pair plus decoupled negatives."""
    u, v = map(int, rng.choice(n_entities, size=2, replace=False))
    return make_tuple((u, v), k, n_entities, tuple_seed=int(rng.integers(1 << 31)))


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / scale)
