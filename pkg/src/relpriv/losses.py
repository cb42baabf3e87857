"""Relation scoring and tuple losses with exact embedding gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relpriv.encoder import EncoderParams, encode
from relpriv.errors import ConfigError

LOSS_KINDS = ("infonce", "hinge")


@dataclass
class TupleScores:
    z_pos: float
    z_neg: np.ndarray  # (k,)
    temperature: float = 1.0
    margin: float = 1.0


def score(h_u: np.ndarray, h_w: np.ndarray) -> float:
    """Dot-product relation score."""
    h_u = np.asarray(h_u, dtype=np.float64)
    h_w = np.asarray(h_w, dtype=np.float64)
    if h_u.shape != h_w.shape:
        raise ConfigError(f"embedding dimensions differ: {h_u.shape} vs {h_w.shape}")
    return float(h_u @ h_w)


def infonce_batch(z_pos, z_neg, temperature: float = 1.0):
    """Vectorized InfoNCE over rows: z_pos (n,), z_neg (n, k).

    Returns (losses (n,), dz_pos (n,), dz_neg (n, k)). Uses max-subtraction
    so saturated scores cannot overflow.
    """
    z_pos = np.asarray(z_pos, dtype=np.float64)
    z_neg = np.asarray(z_neg, dtype=np.float64)
    z = np.concatenate([z_pos[:, None], z_neg], axis=1) / temperature
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[:, 0]
    soft = np.exp(z - lse[:, None])
    dz = soft / temperature
    dz[:, 0] -= 1.0 / temperature
    return losses, dz[:, 0], dz[:, 1:]


def hinge_batch(z_pos, z_neg, margin: float = 1.0):
    """Vectorized pairwise hinge, negatives aggregated by sum.

    loss = sum_j max(0, margin + z_neg_j - z_pos); the subgradient at the
    kink is taken as 0.
    """
    z_pos = np.asarray(z_pos, dtype=np.float64)
    z_neg = np.asarray(z_neg, dtype=np.float64)
    violation = margin + z_neg - z_pos[:, None]
    active = violation > 0.0
    losses = np.where(active, violation, 0.0).sum(axis=1)
    dz_neg = active.astype(np.float64)
    dz_pos = -dz_neg.sum(axis=1)
    return losses, dz_pos, dz_neg


def infonce(scores: TupleScores):
    """InfoNCE loss for one tuple; returns (loss, dloss/dz over [pos, negs])."""
    if np.asarray(scores.z_neg).size < 1:
        raise ConfigError("InfoNCE needs at least one negative score")
    losses, dzp, dzn = infonce_batch(
        np.array([scores.z_pos]), np.asarray(scores.z_neg)[None, :], scores.temperature
    )
    return float(losses[0]), np.concatenate([[dzp[0]], dzn[0]])


def hinge(scores: TupleScores):
    """Pairwise hinge loss for one tuple; returns (loss, dloss/dz)."""
    if np.asarray(scores.z_neg).size < 1:
        raise ConfigError("hinge needs at least one negative score")
    if scores.margin <= 0:
        raise ConfigError("hinge margin must be positive")
    losses, dzp, dzn = hinge_batch(
        np.array([scores.z_pos]), np.asarray(scores.z_neg)[None, :], scores.margin
    )
    return float(losses[0]), np.concatenate([[dzp[0]], dzn[0]])


def batch_loss_grads(z_pos, z_neg, kind: str, temperature: float, margin: float):
    if kind == "infonce":
        return infonce_batch(z_pos, z_neg, temperature)
    if kind == "hinge":
        return hinge_batch(z_pos, z_neg, margin)
    raise ConfigError(f"unknown loss kind {kind!r}")


def tuple_objective(
    params: EncoderParams,
    graph,
    tup,
    kind: str = "infonce",
    temperature: float = 1.0,
    margin: float = 1.0,
):
    """Encode a tuple's entities and differentiate its loss to the embeddings.

    Returns (loss, grads, traces). grads maps entity id -> dloss/dh; the
    anchor accumulates one term per relation it appears in (the positive
    and all k negatives), the mate and each negative get one term each.
    """
    entities = list(dict.fromkeys(tup.entities()))
    traces = {}
    embeddings = {}
    for ent in entities:
        h, trace = encode(params, graph.token_seq(ent))
        traces[ent] = trace
        embeddings[ent] = h

    h_anchor = embeddings[tup.anchor]
    h_mate = embeddings[tup.mate]
    z_pos = float(h_anchor @ h_mate)
    z_neg = np.array([float(h_anchor @ embeddings[v]) for v in tup.negatives])
    losses, dzp, dzn = batch_loss_grads(
        np.array([z_pos]), z_neg[None, :], kind, temperature, margin
    )
    dzp = float(dzp[0])
    dzn = dzn[0]

    grads: dict = {ent: np.zeros_like(h_anchor) for ent in entities}
    grads[tup.anchor] += dzp * h_mate
    grads[tup.mate] += dzp * h_anchor
    for j, v in enumerate(tup.negatives):
        grads[tup.anchor] += dzn[j] * embeddings[v]
        grads[v] += dzn[j] * h_anchor
    return float(losses[0]), grads, traces


def tuple_loss_grads(
    params: EncoderParams,
    graph,
    tup,
    kind: str = "infonce",
    temperature: float = 1.0,
    margin: float = 1.0,
) -> dict:
    """Map entity id -> gradient of the tuple loss w.r.t. its embedding."""
    _, grads, _ = tuple_objective(params, graph, tup, kind, temperature, margin)
    return grads
