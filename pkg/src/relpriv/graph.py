"""Text-attributed graph data model, file ingestion, and synthetic generation.

File formats (UTF-8, tab separated, one record per line):

    entities    id<TAB>token_id[,token_id...]      pre-tokenized mode
                id<TAB>raw text                    text mode (requires a vocab)
    relations   u<TAB>v                            '#' starts a comment line
    vocab       token<TAB>id                       id 0 is reserved for padding
    labels      id<TAB>class                       optional, probe evaluation

Relations are undirected: (u, v) and (v, u) denote the same element and are
stored canonically as (min, max); self-loops are rejected. Canonical save
order is entities ascending by id and relations ascending by (min, max), so
save -> load -> save is byte-stable.

Token id 0 is the padding id and is never produced by tokenization; every
entity carries a fixed-width id row padded with 0 past its true length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from relpriv.errors import ConfigError, DataFormatError
from relpriv.rng import stream_rng

PAD_ID = 0
DEFAULT_MAX_TOKENS = 32

# Share of tokens drawn from an entity's own community block in the
# synthetic generator; the rest are uniform over the whole vocabulary.
# Kept below 1/2 so raw (untrained) embeddings separate communities only
# weakly and supervision has something to add.
_COMMUNITY_TOKEN_MASS = 0.35


def canonical_pair(u: int, v: int) -> tuple[int, int]:
    """Undirected relation key; rejects self-loops."""
    if u == v:
        raise DataFormatError(f"self-loop relation ({u}, {v}) is not allowed")
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class TokenSeq:
    """Fixed-width token id row for one entity.

    ids has the graph's max-token width; positions >= length hold PAD_ID.
    """

    ids: np.ndarray
    length: int

    def validate(self, vocab_size: int) -> None:
        if not 1 <= self.length <= self.ids.shape[0]:
            raise DataFormatError(f"token length {self.length} out of range")
        real = self.ids[: self.length]
        if real.min(initial=vocab_size) < 1 or (real >= vocab_size).any():
            raise DataFormatError("token id out of range or padding id used as a token")
        if (self.ids[self.length:] != PAD_ID).any():
            raise DataFormatError("positions past the token length must hold the pad id")


@dataclass(frozen=True)
class TextAttributedGraph:
    """Entity set 0..N-1 with token attributes and an undirected relation set."""

    n_entities: int
    tokens: np.ndarray  # (N, max_tokens) int64, PAD_ID past each length
    lengths: np.ndarray  # (N,) int64
    relations: frozenset
    vocab_size: int
    max_tokens: int

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def has_relation(self, u: int, v: int) -> bool:
        if u == v:
            return False
        return (min(u, v), max(u, v)) in self.relations

    def token_seq(self, u: int) -> TokenSeq:
        return TokenSeq(ids=self.tokens[u], length=int(self.lengths[u]))

    def sorted_relations(self) -> list[tuple[int, int]]:
        return sorted(self.relations)

    def validate(self) -> None:
        if self.tokens.shape != (self.n_entities, self.max_tokens):
            raise DataFormatError("token matrix shape does not match entity count")
        for u, v in self.relations:
            if not (0 <= u < self.n_entities and 0 <= v < self.n_entities):
                raise DataFormatError(f"relation ({u}, {v}) has a dangling endpoint")
            if u >= v:
                raise DataFormatError(f"relation ({u}, {v}) is not in canonical order")
        for u in range(self.n_entities):
            self.token_seq(u).validate(self.vocab_size)


@dataclass(frozen=True)
class GraphSplit:
    """Disjoint train/eval relation subsets, optionally with probe labels."""

    n_entities: int
    train_relations: tuple
    eval_relations: tuple
    labels: dict | None = field(default=None)

    def validate(self, graph: TextAttributedGraph | None = None) -> None:
        train = set(self.train_relations)
        evals = set(self.eval_relations)
        if train & evals:
            raise DataFormatError("train and eval relation sets overlap")
        if graph is not None:
            if not train <= graph.relations or not evals <= graph.relations:
                raise DataFormatError("split contains relations missing from the graph")


def _parse_int(text: str, path: str, lineno: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: malformed {what} {text!r}") from None


def _data_lines(path: str):
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_vocab(path: str) -> dict:
    """token -> id map; id 0 is reserved for padding and may not appear."""
    vocab: dict = {}
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected token<TAB>id")
        token, ident = parts[0], _parse_int(parts[1], path, lineno, "vocab id")
        if ident < 1:
            raise DataFormatError(f"{path}:{lineno}: vocab id {ident} collides with the pad id")
        if token in vocab:
            raise DataFormatError(f"{path}:{lineno}: duplicate vocab token {token!r}")
        vocab[token] = ident
    if not vocab:
        raise DataFormatError(f"{path}: empty vocabulary")
    return vocab


def _parse_entity_line(
    line: str,
    path: str,
    lineno: int,
    vocab: dict | None,
) -> tuple[int, list]:
    parts = line.split("\t", 1)
    if len(parts) != 2:
        raise DataFormatError(f"{path}:{lineno}: expected id<TAB>tokens")
    ident = _parse_int(parts[0], path, lineno, "entity id")
    if vocab is None:
        try:
            ids = [int(tok) for tok in parts[1].split(",") if tok != ""]
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: malformed token id list") from None
    else:
        words = parts[1].split()
        missing = [w for w in words if w not in vocab]
        if missing:
            raise DataFormatError(f"{path}:{lineno}: token {missing[0]!r} not in vocabulary")
        ids = [vocab[w] for w in words]
    if not ids:
        raise DataFormatError(f"{path}:{lineno}: entity {ident} has no tokens")
    return ident, ids


def load_relation_pairs(path: str, n_entities: int | None = None) -> list[tuple[int, int]]:
    """Parse a relations file into deduplicated canonical pairs."""
    pairs: set = set()
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected u<TAB>v")
        u = _parse_int(parts[0], path, lineno, "entity id")
        v = _parse_int(parts[1], path, lineno, "entity id")
        if u == v:
            raise DataFormatError(f"{path}:{lineno}: self-loop ({u}, {v})")
        if u < 0 or v < 0:
            raise DataFormatError(f"{path}:{lineno}: negative entity id")
        if n_entities is not None and (u >= n_entities or v >= n_entities):
            raise DataFormatError(
                f"{path}:{lineno}: relation ({u}, {v}) has a dangling endpoint "
                f"(entity count is {n_entities})"
            )
        pairs.add(canonical_pair(u, v))
    return sorted(pairs)


def load_labels(path: str, n_entities: int) -> dict:
    """id -> class index map for probe evaluation."""
    labels: dict = {}
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected id<TAB>class")
        ident = _parse_int(parts[0], path, lineno, "entity id")
        if not 0 <= ident < n_entities:
            raise DataFormatError(f"{path}:{lineno}: label for unknown entity {ident}")
        labels[ident] = _parse_int(parts[1], path, lineno, "class index")
    return labels


def load_graph(
    entities_path: str,
    relations_path: str,
    *,
    vocab_path: str | None = None,
    text_mode: bool = False,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    vocab_size: int | None = None,
) -> TextAttributedGraph:
    """Load and validate a graph from entities + relations files.

    In text mode the entities file carries whitespace-separated words and a
    vocab file is required; otherwise token id lists are read directly and
    the vocabulary size is inferred as max id + 1 unless given.
    """
    if text_mode and vocab_path is None:
        raise ConfigError("text mode requires a vocabulary file")
    vocab = load_vocab(vocab_path) if text_mode else None

    records: dict = {}
    for lineno, line in _data_lines(entities_path):
        ident, ids = _parse_entity_line(line, entities_path, lineno, vocab)
        if ident in records:
            raise DataFormatError(f"{entities_path}:{lineno}: duplicate entity id {ident}")
        records[ident] = (lineno, ids)
    if not records:
        raise DataFormatError(f"{entities_path}: no entities")

    n = len(records)
    if sorted(records) != list(range(n)):
        raise DataFormatError(f"{entities_path}: entity ids must be exactly 0..{n - 1}")

    tokens = np.full((n, max_tokens), PAD_ID, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    max_id = 0
    for ident in range(n):
        lineno, ids = records[ident]
        ids = ids[:max_tokens]
        for tok in ids:
            if tok < 1:
                raise DataFormatError(
                    f"{entities_path}:{lineno}: token id {tok} is reserved or negative"
                )
        tokens[ident, : len(ids)] = ids
        lengths[ident] = len(ids)
        max_id = max(max_id, max(ids))

    if vocab is not None:
        inferred = max(vocab.values()) + 1
    else:
        inferred = max_id + 1
    if vocab_size is None:
        vocab_size = inferred
    elif vocab_size < inferred:
        raise DataFormatError(
            f"vocab size {vocab_size} is smaller than the largest token id {inferred - 1}"
        )

    pairs = load_relation_pairs(relations_path, n_entities=n)
    if not pairs:
        raise DataFormatError(f"{relations_path}: empty relation set")

    graph = TextAttributedGraph(
        n_entities=n,
        tokens=tokens,
        lengths=lengths,
        relations=frozenset(pairs),
        vocab_size=vocab_size,
        max_tokens=max_tokens,
    )
    graph.validate()
    return graph


def save_relations(path: str, relations) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in sorted(canonical_pair(a, b) for a, b in relations):
            fh.write(f"{u}\t{v}\n")


def save_labels(path: str, labels: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ident in sorted(labels):
            fh.write(f"{ident}\t{labels[ident]}\n")


def save_graph(graph: TextAttributedGraph, entities_path: str, relations_path: str) -> None:
    """Write a graph in canonical order (token ids, not raw text)."""
    with open(entities_path, "w", encoding="utf-8") as fh:
        for u in range(graph.n_entities):
            seq = graph.token_seq(u)
            ids = ",".join(str(t) for t in seq.ids[: seq.length])
            fh.write(f"{u}\t{ids}\n")
    save_relations(relations_path, graph.relations)


def split_relations(
    graph: TextAttributedGraph,
    eval_fraction: float,
    seed: int,
    *,
    labels: dict | None = None,
) -> GraphSplit:
    """Deterministically split relations into train and eval subsets."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval fraction {eval_fraction} must lie in (0, 1)")
    rels = graph.sorted_relations()
    if len(rels) < 2:
        raise DataFormatError("need at least two relations to split")
    n_eval = int(round(eval_fraction * len(rels)))
    if n_eval == 0 or n_eval == len(rels):
        raise ConfigError(
            f"eval fraction {eval_fraction} yields an empty train or eval set "
            f"for {len(rels)} relations"
        )
    perm = stream_rng(seed, "split").permutation(len(rels))
    eval_idx = set(perm[:n_eval].tolist())
    train = tuple(r for i, r in enumerate(rels) if i not in eval_idx)
    evals = tuple(r for i, r in enumerate(rels) if i in eval_idx)
    split = GraphSplit(
        n_entities=graph.n_entities,
        train_relations=train,
        eval_relations=evals,
        labels=labels,
    )
    split.validate(graph)
    return split


def community_of(entity: int, n_communities: int) -> int:
    """Community assignment used by the synthetic generator (round-robin)."""
    return entity % n_communities


def community_labels(n_entities: int, n_communities: int) -> dict:
    return {u: community_of(u, n_communities) for u in range(n_entities)}


def synth_graph(
    n_entities: int,
    n_communities: int,
    p_in: float,
    p_out: float,
    vocab_size: int,
    seed: int,
    *,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> TextAttributedGraph:
    """Planted-partition graph with community-conditioned token attributes.

    Entities are assigned to communities round-robin by id. Each unordered
    pair is a relation independently with probability p_in (same community)
    or p_out (different). The first token is a quasi-identifying marker
    (entity id folded into the vocabulary), mirroring the distinctive words
    real titles carry; the remaining tokens come from a community block of
    the vocabulary with probability `_COMMUNITY_TOKEN_MASS`, else uniformly,
    so attributes correlate with the relation structure.
    """
    if n_communities < 1 or n_entities < n_communities:
        raise ConfigError("need n_entities >= n_communities >= 1")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ConfigError("need p_in > p_out >= 0 and p_in <= 1")
    if vocab_size < n_communities + 1:
        raise ConfigError("vocabulary too small for one block per community")
    if max_tokens < 1:
        raise ConfigError("max_tokens must be positive")

    rng = stream_rng(seed, "synth")
    comm = np.arange(n_entities, dtype=np.int64) % n_communities

    pairs = []
    for u in range(n_entities - 1):
        vs = np.arange(u + 1, n_entities)
        probs = np.where(comm[vs] == comm[u], p_in, p_out)
        hits = vs[rng.random(vs.shape[0]) < probs]
        pairs.extend((u, int(v)) for v in hits)
    if not pairs:
        raise DataFormatError("synthetic graph came out with no relations")

    block_width = (vocab_size - 1) // n_communities
    block_start = 1 + comm * block_width

    min_len = max(1, max_tokens // 2)
    lengths = rng.integers(min_len, max_tokens + 1, size=n_entities)
    in_block = rng.random((n_entities, max_tokens)) < _COMMUNITY_TOKEN_MASS
    block_tok = block_start[:, None] + rng.integers(
        0, block_width, size=(n_entities, max_tokens)
    )
    uniform_tok = rng.integers(1, vocab_size, size=(n_entities, max_tokens))
    tokens = np.where(in_block, block_tok, uniform_tok)
    if max_tokens >= 2:
        tokens[:, 0] = 1 + np.arange(n_entities, dtype=np.int64) % (vocab_size - 1)
    tokens[np.arange(max_tokens)[None, :] >= lengths[:, None]] = PAD_ID

    graph = TextAttributedGraph(
        n_entities=n_entities,
        tokens=tokens,
        lengths=lengths,
        relations=frozenset(pairs),
        vocab_size=vocab_size,
        max_tokens=max_tokens,
    )
    graph.validate()
    return graph
