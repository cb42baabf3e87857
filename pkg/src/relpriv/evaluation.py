"""Relation-prediction metrics, linear probing, and the membership audit.

Evaluation may use in-batch negatives freely: no privacy budget is spent
at inference time, unlike during training where in-batch coupling would
break the sensitivity analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _normal, rankdata

from relpriv.encoder import EncoderParams, encode_entities
from relpriv.errors import ConfigError
from relpriv.rng import stream_rng

DEFAULT_EVAL_BATCH = 256
DEFAULT_FPR_LEVELS = (0.01, 0.05, 0.1)


@dataclass
class RankingBatch:
    """Query/target embedding pairs scored against each other in-batch."""

    queries: np.ndarray  # (B, d)
    targets: np.ndarray  # (B, d)


@dataclass
class MiaReport:
    member_scores: np.ndarray
    nonmember_scores: np.ndarray
    tpr_at_fpr: dict
    wilcoxon_p: float


def target_ranks(batch: RankingBatch) -> np.ndarray:
    """Rank of each query's true target among all batch targets.

    Scores are dot products; ties are broken by target index, so an
    equal-scoring target with a smaller index outranks the true one.
    """
    q = np.asarray(batch.queries, dtype=np.float64)
    t = np.asarray(batch.targets, dtype=np.float64)
    if q.shape != t.shape or q.ndim != 2:
        raise ConfigError("queries and targets must be matching (B, d) arrays")
    if q.shape[0] < 2:
        raise ConfigError("ranking needs at least two pairs in the batch")
    scores = q @ t.T
    own = np.diag(scores)
    higher = (scores > own[:, None]).sum(axis=1)
    idx = np.arange(q.shape[0])
    tied_before = ((scores == own[:, None]) & (idx[None, :] < idx[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def metrics_from_ranks(ranks) -> tuple:
    ranks = np.asarray(ranks, dtype=np.float64)
    prec1 = float((ranks == 1).mean())
    mrr = float((1.0 / ranks).mean())
    return prec1, mrr


def rank_metrics(batch: RankingBatch) -> tuple:
    """(PREC@1, MRR) for one in-batch-negative ranking batch."""
    return metrics_from_ranks(target_ranks(batch))


def embed_graph_entities(params: EncoderParams, graph, entity_ids) -> np.ndarray:
    entity_ids = np.asarray(entity_ids, dtype=np.int64)
    return encode_entities(params, graph.tokens[entity_ids], graph.lengths[entity_ids])


def evaluate_relations(
    params: EncoderParams,
    graph,
    relations,
    *,
    batch_size: int = DEFAULT_EVAL_BATCH,
    seed: int = 0,
) -> dict:
    """Ranking metrics over held-out relations, in batches with in-batch
    negatives.

    Relations are shuffled deterministically, queries take the smaller
    endpoint and targets the larger, and a trailing chunk smaller than two
    pairs is dropped.
    """
    relations = [tuple(r) for r in relations]
    if len(relations) < 2:
        raise ConfigError("need at least two eval relations")
    order = stream_rng(seed, "eval").permutation(len(relations))
    relations = [relations[i] for i in order]

    needed = sorted({e for r in relations for e in r})
    emb = embed_graph_entities(params, graph, needed)
    emb_of = {e: emb[i] for i, e in enumerate(needed)}

    ranks = []
    for start in range(0, len(relations), batch_size):
        chunk = relations[start : start + batch_size]
        if len(chunk) < 2:
            break
        batch = RankingBatch(
            queries=np.stack([emb_of[min(u, v)] for u, v in chunk]),
            targets=np.stack([emb_of[max(u, v)] for u, v in chunk]),
        )
        ranks.extend(target_ranks(batch).tolist())
    prec1, mrr = metrics_from_ranks(ranks)
    return {"prec1": prec1, "mrr": mrr, "n_queries": len(ranks)}


def f1_counts(y_true, y_pred, n_classes: int):
    """Per-class F1 plus (macro, micro); undefined ratios count as 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    per_class = np.zeros(n_classes)
    tp_total = 0
    for c in range(n_classes):
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        tp_total += tp
        denom = 2 * tp + fp + fn
        per_class[c] = (2 * tp / denom) if denom else 0.0
    macro = float(per_class.mean())
    micro = float(tp_total / y_true.shape[0])  # single-label: micro-F1 = accuracy
    return per_class, macro, micro


def linear_probe(
    embeddings,
    labels,
    shots: int,
    seed: int,
    *,
    lr: float = 0.5,
    epochs: int = 400,
    check_every: int = 10,
) -> tuple:
    """Few-shot softmax probe on frozen embeddings; returns (macro, micro) F1.

    Per class, `shots` entities train the probe and `shots` more select the
    reported iterate by validation accuracy; everything else is the test
    pool. The probe itself is a convex softmax regression trained by plain
    full-batch gradient descent from zero init, so only the shot selection
    consumes randomness.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ConfigError("embeddings and labels disagree on entity count")
    classes = np.unique(y)
    n_classes = int(classes.max()) + 1
    rng = stream_rng(seed, "probe")

    train_idx, val_idx, test_idx = [], [], []
    for c in classes:
        members = np.nonzero(y == c)[0]
        if members.shape[0] < 2 * shots + 1:
            raise ConfigError(
                f"class {int(c)} has {members.shape[0]} labeled entities; "
                f"need at least {2 * shots + 1}"
            )
        members = members[rng.permutation(members.shape[0])]
        train_idx.extend(members[:shots])
        val_idx.extend(members[shots : 2 * shots])
        test_idx.extend(members[2 * shots :])

    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0) + 1e-12
    xn = (x - mu) / sd

    w = np.zeros((n_classes, x.shape[1]))
    b = np.zeros(n_classes)
    xt, yt = xn[train_idx], y[train_idx]
    onehot = np.eye(n_classes)[yt]

    def predict(idx):
        logits = xn[idx] @ w.T + b
        return logits.argmax(axis=1)

    best = (-1.0, w.copy(), b.copy())
    for epoch in range(1, epochs + 1):
        logits = xt @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        diff = (probs - onehot) / xt.shape[0]
        w -= lr * (diff.T @ xt)
        b -= lr * diff.sum(axis=0)
        if epoch % check_every == 0:
            val_acc = float((predict(val_idx) == y[val_idx]).mean())
            if val_acc > best[0]:
                best = (val_acc, w.copy(), b.copy())
    _, w, b = best

    preds = predict(test_idx)
    _, macro, micro = f1_counts(y[test_idx], preds, n_classes)
    return macro, micro


def cosine_scores(emb_u: np.ndarray, emb_w: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; zero vectors score exactly 0."""
    emb_u = np.asarray(emb_u, dtype=np.float64)
    emb_w = np.asarray(emb_w, dtype=np.float64)
    nu = np.linalg.norm(emb_u, axis=-1)
    nw = np.linalg.norm(emb_w, axis=-1)
    denom = nu * nw
    out = np.zeros(denom.shape)
    ok = denom > 0
    out[ok] = (emb_u * emb_w).sum(axis=-1)[ok] / denom[ok]
    return out


def mia_scores(params: EncoderParams, graph, pairs) -> np.ndarray:
    """Distance-based membership score per pair: cosine of the two
    embeddings (higher means predicted member)."""
    pairs = [tuple(p) for p in pairs]
    needed = sorted({e for p in pairs for e in p})
    emb = embed_graph_entities(params, graph, needed)
    emb_of = {e: emb[i] for i, e in enumerate(needed)}
    us = np.stack([emb_of[u] for u, _ in pairs])
    ws = np.stack([emb_of[w] for _, w in pairs])
    return cosine_scores(us, ws)


def tpr_at_fpr(member_scores, nonmember_scores, fpr_levels=DEFAULT_FPR_LEVELS) -> dict:
    """True-positive rate of the threshold attack at given false-positive
    rates.

    For each level f the threshold is the smallest candidate score at which
    the fraction of non-members scoring >= it is at most f (falling back to
    +inf when no candidate qualifies); the TPR is the member fraction at or
    above that threshold.
    """
    members = np.asarray(member_scores, dtype=np.float64)
    nonmembers = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
    if members.size == 0 or nonmembers.size == 0:
        raise ConfigError("both score samples must be non-empty")
    n = nonmembers.shape[0]
    candidates = np.unique(np.concatenate([members, nonmembers]))
    # fraction of non-members >= each candidate
    fpr = (n - np.searchsorted(nonmembers, candidates, side="left")) / n
    out = {}
    for level in fpr_levels:
        ok = np.nonzero(fpr <= level)[0]
        threshold = candidates[ok[0]] if ok.size else np.inf
        out[float(level)] = float((members >= threshold).mean())
    return out


def signed_rank_statistic(diffs) -> tuple:
    """(W+, |diff| average ranks) after dropping zero differences."""
    diffs = np.asarray(diffs, dtype=np.float64)
    diffs = diffs[diffs != 0.0]
    if diffs.shape[0] < 5:
        raise ConfigError("need at least 5 non-zero differences")
    ranks = rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    return w_plus, ranks


def exact_signed_rank_tail(ranks, w_obs: float) -> float:
    """P(W+ >= w_obs) by enumerating all 2^n sign assignments.

    Meet-in-the-middle over the two halves of the rank vector keeps the
    enumeration exact (average ranks are halves, so sums stay exact in
    float64) while handling n = 20 comfortably.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    half = ranks.shape[0] // 2

    def subset_sums(values):
        sums = np.zeros(1)
        for v in values:
            sums = np.concatenate([sums, sums + v])
        return sums

    left = subset_sums(ranks[:half])
    right = np.sort(subset_sums(ranks[half:]))
    count = 0
    for s in left:
        count += right.shape[0] - np.searchsorted(right, w_obs - s, side="left")
    return count / (2.0 ** ranks.shape[0])


def wilcoxon_signed_rank(diffs, *, exact_limit: int = 20) -> float:
    """One-sided signed-rank p-value, H1: differences tend positive.

    Zero differences are dropped. Exact enumeration up to exact_limit
    non-zero differences; beyond that a normal approximation with tie and
    continuity corrections.
    """
    w_plus, ranks = signed_rank_statistic(diffs)
    n = ranks.shape[0]
    if n <= exact_limit:
        return exact_signed_rank_tail(ranks, w_plus)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    z = (w_plus - mean - 0.5) / np.sqrt(var)
    return float(_normal.sf(z))


def audit(
    params: EncoderParams,
    graph,
    member_pairs,
    nonmember_pairs,
    n_pairs: int,
    seed: int,
    *,
    fpr_levels=DEFAULT_FPR_LEVELS,
) -> MiaReport:
    """Membership-inference audit of a trained encoder.

    Samples n_pairs members (training relations) and n_pairs non-members
    (held-out pairs), scores both by embedding cosine, pairs them by index
    for the signed-rank test, and reports TPR at the requested FPR levels.
    """
    member_pairs = [tuple(p) for p in member_pairs]
    nonmember_pairs = [tuple(p) for p in nonmember_pairs]
    if len(member_pairs) < n_pairs or len(nonmember_pairs) < n_pairs:
        raise ConfigError(
            f"need {n_pairs} member and non-member pairs; have "
            f"{len(member_pairs)} and {len(nonmember_pairs)}"
        )
    rng = stream_rng(seed, "audit")
    take_m = rng.choice(len(member_pairs), size=n_pairs, replace=False)
    take_n = rng.choice(len(nonmember_pairs), size=n_pairs, replace=False)
    members = [member_pairs[i] for i in take_m]
    nonmembers = [nonmember_pairs[i] for i in take_n]

    m_scores = mia_scores(params, graph, members)
    n_scores = mia_scores(params, graph, nonmembers)
    return MiaReport(
        member_scores=m_scores,
        nonmember_scores=n_scores,
        tpr_at_fpr=tpr_at_fpr(m_scores, n_scores, fpr_levels),
        wilcoxon_p=wilcoxon_signed_rank(m_scores - n_scores),
    )


def score_histogram(report: MiaReport, bins: int = 40):
    """Two-column (bin left edge, member count, non-member count) table."""
    lo = min(report.member_scores.min(), report.nonmember_scores.min())
    hi = max(report.member_scores.max(), report.nonmember_scores.max())
    edges = np.linspace(lo, hi, bins + 1)
    m_counts, _ = np.histogram(report.member_scores, bins=edges)
    n_counts, _ = np.histogram(report.nonmember_scores, bins=edges)
    return [
        (float(edges[i]), int(m_counts[i]), int(n_counts[i])) for i in range(bins)
    ]
