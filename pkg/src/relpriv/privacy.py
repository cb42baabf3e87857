"""Per-tuple gradient mechanics: assembly, clipping, noising, optimizers.

A tuple's parameter gradient lives in a GradVector whose group order is
fixed by EncoderParams.trainable_groups(): "embed" first (full mode), then
per block weight/bias, or lora_down/lora_up in adapter mode. Noise draws
iterate groups in that order, so a given RNG state always produces the
same noise regardless of batch content.

Two interchangeable gradient paths exist on purpose: tuple_grad_outer
completes each dense gradient as one stacked product G^T H, while
tuple_grad_naive first materializes every per-token outer product and then
sums them. The naive path is the correctness oracle and the memory
anti-pattern the stacked path avoids; both can report their live float64
footprint through a ScalarCounter.

Non-finite gradient components are a hard error everywhere: silently
repairing them would void the sensitivity bound the clipping provides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from relpriv.encoder import EncoderParams, LowRankGradCache
from relpriv.errors import ConfigError, TrainingError

# Use the Gram-matrix norm path once a materialized dense gradient would
# exceed this many scalars; below it, materializing G^T H is cheaper.
DEFAULT_GRAM_THRESHOLD = 1 << 22


class ScalarCounter:
    """Tracks live float64 scalars allocated along a gradient path."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, n: int) -> None:
        self.live += int(n)
        self.peak = max(self.peak, self.live)

    def free(self, n: int) -> None:
        self.live -= int(n)


@dataclass
class GradVector:
    """One named float64 block per trainable parameter group, fixed order."""

    groups: dict

    @classmethod
    def zeros_like_params(cls, params: EncoderParams) -> "GradVector":
        return cls({name: np.zeros_like(arr) for name, arr in params.trainable_groups().items()})

    def copy(self) -> "GradVector":
        return GradVector({name: arr.copy() for name, arr in self.groups.items()})

    def norm(self) -> float:
        total = 0.0
        for arr in self.groups.values():
            total += float((arr * arr).sum())
        return math.sqrt(total)

    def add_(self, other: "GradVector", scale: float = 1.0) -> "GradVector":
        for name, arr in self.groups.items():
            arr += scale * other.groups[name]
        return self

    def scaled(self, factor: float) -> "GradVector":
        return GradVector({name: arr * factor for name, arr in self.groups.items()})

    def scale_(self, factor: float) -> "GradVector":
        for arr in self.groups.values():
            arr *= factor
        return self

    def to_flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for arr in self.groups.values()])

    def check_finite(self) -> None:
        for name, arr in self.groups.items():
            if not np.isfinite(arr).all():
                raise TrainingError(f"non-finite gradient in group {name}")


def _embed_group_order(cache: LowRankGradCache) -> list:
    names = []
    if cache.mode == "full":
        names.append("embed")
    for i in range(len(cache.layers)):
        if cache.mode == "full":
            names.extend([f"block{i}.weight", f"block{i}.bias"])
        else:
            names.extend([f"block{i}.lora_down", f"block{i}.lora_up"])
    return names


def tuple_grad_outer(cache: LowRankGradCache, counter: ScalarCounter | None = None) -> GradVector:
    """Complete the tuple gradient via stacked matrix products.

    Dense gradients come out as one G^T H per layer, bias gradients as
    column sums of G, and the embedding gradient is accumulated sparsely by
    token id; per-token outer products are never materialized.
    """
    groups: dict = {}
    if cache.mode == "full":
        embed_grad = np.zeros((cache.vocab_size, cache.d_emb))
        np.add.at(embed_grad, cache.embed_ids, cache.embed_grads)
        if counter is not None:
            counter.alloc(embed_grad.size)
        groups["embed"] = embed_grad
    for i, layer in enumerate(cache.layers):
        if layer.inputs.shape[0] != layer.out_grads.shape[0]:
            raise ConfigError(f"layer {i}: misaligned gradient factors")
        if cache.mode == "full":
            weight_grad = layer.out_grads.T @ layer.inputs
            bias_grad = layer.out_grads.sum(axis=0)
            if counter is not None:
                counter.alloc(weight_grad.size + bias_grad.size)
            groups[f"block{i}.weight"] = weight_grad
            groups[f"block{i}.bias"] = bias_grad
        else:
            scale = layer.adapter_scale
            down_grad = scale * (layer.adapter_out_grads.T @ layer.inputs)
            up_grad = scale * (layer.out_grads.T @ layer.adapter_inputs)
            if counter is not None:
                counter.alloc(down_grad.size + up_grad.size)
            groups[f"block{i}.lora_down"] = down_grad
            groups[f"block{i}.lora_up"] = up_grad
    return GradVector({name: groups[name] for name in _embed_group_order(cache)})


def tuple_grad_naive(cache: LowRankGradCache, counter: ScalarCounter | None = None) -> GradVector:
    """Oracle path: instantiate every per-token outer product, then sum.

    Mathematically identical to tuple_grad_outer; deliberately keeps all
    per-token products alive before reducing so its memory profile shows
    the cost the stacked path removes.
    """
    groups: dict = {}
    if cache.mode == "full":
        embed_grad = np.zeros((cache.vocab_size, cache.d_emb))
        if counter is not None:
            counter.alloc(embed_grad.size)
        for t in range(cache.embed_ids.shape[0]):
            embed_grad[cache.embed_ids[t]] += cache.embed_grads[t]
        groups["embed"] = embed_grad
    for i, layer in enumerate(cache.layers):
        n_rows = layer.inputs.shape[0]
        if cache.mode == "full":
            outers = []
            for t in range(n_rows):
                prod = np.outer(layer.out_grads[t], layer.inputs[t])
                if counter is not None:
                    counter.alloc(prod.size)
                outers.append(prod)
            weight_grad = np.zeros(
                (layer.out_grads.shape[1], layer.inputs.shape[1])
            )
            for prod in outers:
                weight_grad += prod
            bias_grad = np.zeros(layer.out_grads.shape[1])
            for t in range(n_rows):
                bias_grad += layer.out_grads[t]
            if counter is not None:
                counter.alloc(weight_grad.size + bias_grad.size)
                counter.free(sum(p.size for p in outers))
            groups[f"block{i}.weight"] = weight_grad
            groups[f"block{i}.bias"] = bias_grad
        else:
            scale = layer.adapter_scale
            down_outers = [
                np.outer(layer.adapter_out_grads[t], layer.inputs[t]) for t in range(n_rows)
            ]
            up_outers = [
                np.outer(layer.out_grads[t], layer.adapter_inputs[t]) for t in range(n_rows)
            ]
            if counter is not None:
                counter.alloc(sum(p.size for p in down_outers + up_outers))
            down_grad = np.zeros_like(down_outers[0])
            for prod in down_outers:
                down_grad += prod
            up_grad = np.zeros_like(up_outers[0])
            for prod in up_outers:
                up_grad += prod
            down_grad *= scale
            up_grad *= scale
            if counter is not None:
                counter.alloc(down_grad.size + up_grad.size)
                counter.free(sum(p.size for p in down_outers + up_outers))
            groups[f"block{i}.lora_down"] = down_grad
            groups[f"block{i}.lora_up"] = up_grad
    return GradVector({name: groups[name] for name in _embed_group_order(cache)})


def _stacked_sq_norm(left: np.ndarray, right: np.ndarray, gram_threshold: int) -> float:
    """||left.T @ right||_F^2 without materializing it when large.

    Uses <left left^T, right right^T> once the product would exceed the
    threshold; the two paths agree to rounding.
    """
    p, d = left.shape[1], right.shape[1]
    if p * d > gram_threshold:
        return float(((left @ left.T) * (right @ right.T)).sum())
    mat = left.T @ right
    return float((mat * mat).sum())


def tuple_grad_norm(
    cache: LowRankGradCache, *, gram_threshold: int = DEFAULT_GRAM_THRESHOLD
) -> float:
    """Euclidean norm of the full tuple gradient across all trainable groups."""
    total = 0.0
    for layer in cache.layers:
        if cache.mode == "full":
            total += _stacked_sq_norm(layer.out_grads, layer.inputs, gram_threshold)
            bias = layer.out_grads.sum(axis=0)
            total += float((bias * bias).sum())
        else:
            scale = layer.adapter_scale
            total += scale * scale * _stacked_sq_norm(
                layer.adapter_out_grads, layer.inputs, gram_threshold
            )
            total += scale * scale * _stacked_sq_norm(
                layer.out_grads, layer.adapter_inputs, gram_threshold
            )
    if cache.mode == "full":
        uniq, inverse = np.unique(cache.embed_ids, return_inverse=True)
        acc = np.zeros((uniq.shape[0], cache.d_emb))
        np.add.at(acc, inverse, cache.embed_grads)
        total += float((acc * acc).sum())
    return math.sqrt(total)


def clip(grad: GradVector, clip_threshold: float) -> GradVector:
    """Rescale onto the ball of radius clip_threshold; identity inside it."""
    if not clip_threshold > 0:
        raise ConfigError("clip threshold must be positive")
    norm = grad.norm()
    if not math.isfinite(norm):
        raise TrainingError("cannot clip a non-finite gradient")
    if norm <= clip_threshold:
        return grad
    return grad.scaled(clip_threshold / norm)


def privatize_batch(
    tuple_grads,
    clip_threshold: float,
    noise_multiplier: float,
    expected_batch: int,
    rng: np.random.Generator,
    *,
    template: GradVector | None = None,
    per_tuple_noise: bool = False,
) -> GradVector:
    """Sum clipped tuple gradients, add Gaussian noise, divide by the
    expected batch size.

    The divisor is the expected batch size even when the realized Poisson
    batch is smaller; the realized size is data-dependent and must not
    steer the mechanism. By default one noise vector of per-coordinate
    standard deviation noise_multiplier * clip_threshold is added to the
    sum (drawn even for an empty batch). With per_tuple_noise each tuple
    contributes its own draw inside the sum instead.
    """
    if expected_batch < 1:
        raise ConfigError("expected batch size must be at least 1")
    if noise_multiplier < 0:
        raise ConfigError("noise multiplier must be non-negative")
    tuple_grads = list(tuple_grads)
    if template is None:
        if not tuple_grads:
            raise ConfigError("empty batch needs a template for the noise shape")
        template = tuple_grads[0]
    noise_std = 0.0 if noise_multiplier == 0.0 else noise_multiplier * clip_threshold
    if not math.isfinite(noise_std):
        raise ConfigError("noise scale is not finite; an unbounded clip needs sigma = 0")

    acc = GradVector({name: np.zeros_like(arr) for name, arr in template.groups.items()})

    def add_noise() -> None:
        for arr in acc.groups.values():
            arr += rng.standard_normal(arr.shape) * noise_std

    for grad in tuple_grads:
        grad.check_finite()
        acc.add_(clip(grad, clip_threshold))
        if per_tuple_noise:
            add_noise()
    if not per_tuple_noise:
        add_noise()
    return acc.scale_(1.0 / expected_batch)


def learning_rate(base: float, schedule: str, step: int, total_steps: int) -> float:
    """Learning rate at a 0-based step under the named schedule."""
    if schedule == "constant":
        return base
    if total_steps < 1:
        return base
    frac = step / total_steps
    if schedule == "linear":
        return base * (1.0 - frac)
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ConfigError(f"unknown learning-rate schedule {schedule!r}")


def dp_sgd_step(params: EncoderParams, private_grad: GradVector, lr: float) -> EncoderParams:
    """Plain descent step on the privatized gradient."""
    for name, arr in params.trainable_groups().items():
        arr -= lr * private_grad.groups[name]
    return params


@dataclass
class OptimizerState:
    """Adam moment accumulators over the privatized gradient stream."""

    step: int
    m: GradVector
    v: GradVector
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(
    params: EncoderParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> OptimizerState:
    return OptimizerState(
        step=0,
        m=GradVector.zeros_like_params(params),
        v=GradVector.zeros_like_params(params),
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def dp_adam_step(
    state: OptimizerState,
    params: EncoderParams,
    private_grad: GradVector,
    lr: float,
):
    """One Adam update with bias correction on privatized gradients."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, arr in params.trainable_groups().items():
        g = private_grad.groups[name]
        m = state.m.groups[name]
        v = state.v.groups[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return state, params


def memory_estimate(
    n_entity_slots: int,
    tokens_per_entity: int,
    layer_dims,
    mode: str = "full",
    lora_rank: int | None = None,
):
    """Exact live-scalar counts of the naive vs stacked gradient paths.

    layer_dims is a sequence of (d_out, d_in) pairs; counts are summed over
    layers. Per layer the naive path holds one p x d product per token slot
    (K * M of them), the stacked path holds the K * M factor rows of widths
    p and d plus the single completed p x d product. In adapter mode the
    per-token products are the two factor gradients of sizes p*r and r*d
    and the stacked path additionally records the two projected factors of
    width r, completing only (p + d) * r scalars.
    """
    if n_entity_slots < 1 or tokens_per_entity < 1:
        raise ConfigError("entity and token counts must be positive")
    if mode == "adapter" and (lora_rank is None or lora_rank < 1):
        raise ConfigError("adapter estimates need a positive rank")
    km = n_entity_slots * tokens_per_entity
    naive = 0
    lowrank = 0
    for d_out, d_in in layer_dims:
        if d_out < 1 or d_in < 1:
            raise ConfigError("layer dimensions must be positive")
        if mode == "full":
            naive += km * d_out * d_in
            lowrank += km * (d_out + d_in) + d_out * d_in
        else:
            naive += km * (d_out + d_in) * lora_rank
            lowrank += km * (d_out + d_in + 2 * lora_rank) + (d_out + d_in) * lora_rank
    return naive, lowrank
