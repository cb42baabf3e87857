"""The private training loop: sample, backprop, clip, noise, update.

Each step Poisson-samples a batch of relation tuples, computes every
tuple's gradient through the low-rank path, clips each to the threshold,
sums, adds one Gaussian noise vector (drawn from a per-step stream so two
counterfactual runs on adjacent relation sets see identical noise), and
divides by the expected batch size before the optimizer update.

private_step is the vectorized equivalent of the per-tuple contract path
(tuple_objective -> backward_tuple -> tuple_grad_outer -> clip -> sum); the
test suite holds the two to 1e-12 agreement. It exposes the pre-noise
clipped sum, which is what the sensitivity and adjacency checks measure.

Training log records are line-delimited JSON:
    {"step", "realized_batch", "loss", "grad_norm_median", "epsilon_so_far"}
and the privacy report carries
    {"clip", "noise_multiplier", "sampling_ratio", "steps", "delta",
     "epsilon", "best_order", "accountant_kind"}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from relpriv.accounting import DEFAULT_ORDERS, calibrate_sigma, epsilon_for
from relpriv.encoder import EncoderParams, backward_values, forward_values, init_params
from relpriv.errors import ConfigError, TrainingError
from relpriv.graph import GraphSplit, TextAttributedGraph
from relpriv.losses import LOSS_KINDS, batch_loss_grads
from relpriv.privacy import (
    GradVector,
    dp_adam_step,
    dp_sgd_step,
    init_adam_state,
    learning_rate,
)
from relpriv.rng import stream_rng
from relpriv.sampling import Batch, sample_batch


@dataclass
class PrivacySpec:
    """Privacy-mechanism parameters for one training run.

    clip may be math.inf to disable clipping, but only together with a zero
    noise multiplier (the non-private reference configuration). Exactly one
    of noise_multiplier and target_epsilon must be given; delta defaults to
    1/|train relations|.
    """

    clip: float = 1.0
    noise_multiplier: float | None = None
    expected_batch: int = 256
    steps: int = 1000
    target_epsilon: float | None = None
    delta: float | None = None
    per_tuple_noise: bool = False

    def validate(self) -> None:
        if not self.clip > 0:
            raise ConfigError("clip threshold must be positive")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ConfigError("noise multiplier must be non-negative")
        if self.noise_multiplier is not None and self.target_epsilon is not None:
            raise ConfigError(
                "give either a noise multiplier or a target epsilon, not both"
            )
        if self.noise_multiplier is None and self.target_epsilon is None:
            raise ConfigError("one of noise multiplier / target epsilon is required")
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if math.isinf(self.clip) and (self.noise_multiplier or 0.0) != 0.0:
            raise ConfigError("an unbounded clip requires a zero noise multiplier")
        if self.steps < 0 or self.expected_batch < 1:
            raise ConfigError("steps must be >= 0 and expected batch >= 1")


@dataclass
class TrainConfig:
    loss: str = "infonce"
    negatives: int = 8
    temperature: float = 1.0
    margin: float = 1.0
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.negatives < 1:
            raise ConfigError("need at least one negative per tuple")
        if self.temperature <= 0 or self.margin <= 0 or self.learning_rate <= 0:
            raise ConfigError("temperature, margin and learning rate must be positive")


@dataclass
class EncoderConfig:
    layer_sizes: tuple = (32, 32)
    mode: str = "full"
    lora_rank: int = 4
    lora_alpha: float = 16.0


@dataclass
class PrivacyReport:
    clip: float
    noise_multiplier: float
    sampling_ratio: float
    steps: int
    delta: float
    epsilon: float | None  # None means non-private (sigma = 0)
    best_order: float | None
    accountant_kind: str

    def to_json_dict(self) -> dict:
        return {
            "clip": None if math.isinf(self.clip) else self.clip,
            "noise_multiplier": self.noise_multiplier,
            "sampling_ratio": self.sampling_ratio,
            "steps": self.steps,
            "delta": self.delta,
            "epsilon": self.epsilon,
            "best_order": self.best_order,
            "accountant_kind": self.accountant_kind,
        }


@dataclass
class StepResult:
    realized: int
    losses: np.ndarray  # per surviving tuple
    grad_norms: np.ndarray  # pre-clip per-tuple norms
    summed_clipped: GradVector  # pre-noise, pre-division


def private_step(
    params: EncoderParams,
    graph: TextAttributedGraph,
    batch: Batch,
    train_cfg: TrainConfig,
    clip_threshold: float,
) -> StepResult:
    """Per-tuple gradients, clipping, and the pre-noise sum for one batch.

    Vectorized across the batch; tuples stack their entities in the order
    (anchor, mate, negatives...), each padded to the graph's token width.
    """
    summed = GradVector.zeros_like_params(params)
    n_t = len(batch.tuples)
    if n_t == 0:
        return StepResult(0, np.zeros(0), np.zeros(0), summed)

    ids = np.array([t.entities() for t in batch.tuples], dtype=np.int64)
    n_slots = ids.shape[1]
    flat_ids = ids.reshape(-1)
    tokens = graph.tokens[flat_ids]
    lengths = graph.lengths[flat_ids]
    m_tokens = graph.max_tokens
    rows_per_tuple = n_slots * m_tokens

    xs, mask, pooled = forward_values(params, tokens, lengths)
    d_out = params.d_out
    h = pooled.reshape(n_t, n_slots, d_out)

    z_pos = np.einsum("td,td->t", h[:, 0], h[:, 1])
    z_neg = np.einsum("td,tjd->tj", h[:, 0], h[:, 2:])
    losses, dzp, dzn = batch_loss_grads(
        z_pos, z_neg, train_cfg.loss, train_cfg.temperature, train_cfg.margin
    )
    if not np.isfinite(losses).all():
        raise TrainingError(f"non-finite tuple loss at step {batch.step}")

    dh = np.zeros_like(h)
    dh[:, 0] = dzp[:, None] * h[:, 1] + np.einsum("tj,tjd->td", dzn, h[:, 2:])
    dh[:, 1] = dzp[:, None] * h[:, 0]
    dh[:, 2:] = dzn[..., None] * h[:, 0][:, None, :]

    gs, emb_rows = backward_values(
        params, xs, mask, lengths, dh.reshape(n_t * n_slots, d_out)
    )

    sq_norms = np.zeros(n_t)
    per_layer = []
    for i, blk in enumerate(params.blocks):
        h_rows = xs[i].reshape(n_t, rows_per_tuple, -1)
        g_rows = gs[i].reshape(n_t, rows_per_tuple, -1)
        if params.mode == "full":
            mats = np.matmul(g_rows.transpose(0, 2, 1), h_rows)
            bias = g_rows.sum(axis=1)
            sq_norms += (mats * mats).sum(axis=(1, 2))
            sq_norms += (bias * bias).sum(axis=1)
            per_layer.append((mats, bias))
        else:
            adapter = blk.adapter
            ha = h_rows @ adapter.down.T
            gb = g_rows @ adapter.up
            down_mats = adapter.scale * np.matmul(gb.transpose(0, 2, 1), h_rows)
            up_mats = adapter.scale * np.matmul(g_rows.transpose(0, 2, 1), ha)
            sq_norms += (down_mats * down_mats).sum(axis=(1, 2))
            sq_norms += (up_mats * up_mats).sum(axis=(1, 2))
            per_layer.append((down_mats, up_mats))

    tok_rows = tokens.reshape(n_t, rows_per_tuple)
    emb_segments = None
    if params.mode == "full":
        vocab = params.vocab_size
        emb_flat = emb_rows.reshape(n_t * rows_per_tuple, -1)
        # group rows by (tuple, token id) via one sort; pad rows carry zero
        # gradients and are dropped up front
        offsets = (np.arange(n_t)[:, None] * np.int64(vocab) + tok_rows).reshape(-1)
        live = np.nonzero(tok_rows.reshape(-1) != 0)[0]
        order = live[np.argsort(offsets[live], kind="stable")]
        sorted_off = offsets[order]
        starts = np.nonzero(np.r_[True, sorted_off[1:] != sorted_off[:-1]])[0]
        seg_sums = np.add.reduceat(emb_flat[order], starts, axis=0)
        seg_tuple = sorted_off[starts] // vocab
        seg_token = sorted_off[starts] % vocab
        sq_norms += np.bincount(
            seg_tuple, weights=(seg_sums * seg_sums).sum(axis=1), minlength=n_t
        )
        emb_segments = (seg_tuple, seg_token, seg_sums)

    if not np.isfinite(sq_norms).all():
        raise TrainingError(f"non-finite tuple gradient at step {batch.step}")
    norms = np.sqrt(sq_norms)

    weights = np.ones(n_t)
    over = norms > clip_threshold
    weights[over] = clip_threshold / norms[over]

    for i in range(len(params.blocks)):
        a_mats, b_mats = per_layer[i]
        if params.mode == "full":
            summed.groups[f"block{i}.weight"] += np.tensordot(weights, a_mats, axes=1)
            summed.groups[f"block{i}.bias"] += weights @ b_mats
        else:
            summed.groups[f"block{i}.lora_down"] += np.tensordot(weights, a_mats, axes=1)
            summed.groups[f"block{i}.lora_up"] += np.tensordot(weights, b_mats, axes=1)
    if params.mode == "full":
        seg_tuple, seg_token, seg_sums = emb_segments
        weighted = weights[seg_tuple][:, None] * seg_sums
        embed_sum = summed.groups["embed"]
        for j in range(embed_sum.shape[1]):
            embed_sum[:, j] += np.bincount(
                seg_token, weights=weighted[:, j], minlength=embed_sum.shape[0]
            )

    return StepResult(n_t, losses, norms, summed)


def _add_step_noise(
    grad: GradVector, noise_std: float, rng: np.random.Generator, draws: int
) -> None:
    # Group iteration order fixes the noise stream layout; draws > 1 models
    # the per-tuple-noise reading where every tuple adds its own vector.
    if draws < 1:
        return
    for _ in range(draws):
        for arr in grad.groups.values():
            arr += rng.standard_normal(arr.shape) * noise_std


def resolve_noise_multiplier(
    privacy: PrivacySpec, n_train: int
) -> tuple:
    """(sigma, delta, q) after validation and optional calibration."""
    privacy.validate()
    delta = privacy.delta if privacy.delta is not None else 1.0 / n_train
    q = privacy.expected_batch / n_train
    if privacy.target_epsilon is not None:
        sigma = calibrate_sigma(privacy.target_epsilon, delta, q, privacy.steps)
    else:
        sigma = privacy.noise_multiplier
    return sigma, delta, q


def train(
    graph: TextAttributedGraph,
    split: GraphSplit,
    encoder_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    privacy: PrivacySpec,
    seed: int,
    *,
    log_path: str | None = None,
):
    """Run the full private loop; returns (trained params, privacy report).

    Fully reproducible under (configs, seed): sampling, negatives, noise
    and initialisation all derive from named substreams of the seed.
    """
    train_cfg.validate()
    n_train = len(split.train_relations)
    if n_train == 0:
        raise ConfigError("empty train relation set")
    if privacy.expected_batch > n_train:
        raise ConfigError(
            f"expected batch {privacy.expected_batch} exceeds {n_train} train relations"
        )
    sigma, delta, q = resolve_noise_multiplier(privacy, n_train)

    params = init_params(
        graph.vocab_size,
        encoder_cfg.layer_sizes,
        encoder_cfg.mode,
        lora_rank=encoder_cfg.lora_rank,
        lora_alpha=encoder_cfg.lora_alpha,
        seed=seed,
    )
    state = (
        init_adam_state(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
        if train_cfg.optimizer == "adam"
        else None
    )
    noise_std = 0.0 if sigma == 0.0 else sigma * privacy.clip

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(privacy.steps):
            batch = sample_batch(split, step, privacy.expected_batch, train_cfg.negatives, seed)
            result = private_step(params, graph, batch, train_cfg, privacy.clip)

            grad = result.summed_clipped
            noise_rng = stream_rng(seed, "noise", step)
            draws = result.realized if privacy.per_tuple_noise else 1
            _add_step_noise(grad, noise_std, noise_rng, draws)
            grad.scale_(1.0 / privacy.expected_batch)
            grad.check_finite()

            lr = learning_rate(
                train_cfg.learning_rate, train_cfg.schedule, step, privacy.steps
            )
            if state is None:
                dp_sgd_step(params, grad, lr)
            else:
                dp_adam_step(state, params, grad, lr)

            if log_fh is not None:
                eps_now = None
                if sigma > 0.0:
                    eps_now = epsilon_for(q, sigma, step + 1, delta)[0]
                record = {
                    "step": step,
                    "realized_batch": result.realized,
                    "loss": float(result.losses.mean()) if result.realized else None,
                    "grad_norm_median": (
                        float(np.median(result.grad_norms)) if result.realized else None
                    ),
                    "epsilon_so_far": eps_now,
                }
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    if sigma > 0.0 and privacy.steps > 0:
        epsilon, best_order = epsilon_for(q, sigma, privacy.steps, delta)
        accountant_kind = "rdp"
    elif sigma > 0.0:
        epsilon, best_order, accountant_kind = 0.0, None, "rdp"
    else:
        epsilon, best_order, accountant_kind = None, None, "none"

    report = PrivacyReport(
        clip=privacy.clip,
        noise_multiplier=float(sigma),
        sampling_ratio=q,
        steps=privacy.steps,
        delta=delta,
        epsilon=epsilon,
        best_order=best_order,
        accountant_kind=accountant_kind,
    )
    return params, report
