"""Token-sequence encoder with a manual forward/backward pass.

Architecture: embedding lookup, then L position-wise dense blocks (tanh
after every block except the last, which stays linear), then a mean pool
over non-pad positions. Blocks never mix tokens, so the gradient of any
dense weight through one tuple is a sum of per-token outer products
g_t h_t^T; the backward pass records the stacked factors (H, G) per layer
instead of materializing that sum, which is what the privacy engine's
low-rank gradient path consumes.

Two training modes:

    "full"     embedding, block weights and biases are trainable
    "adapter"  base weights are frozen; each block trains a low-rank pair
               (down: r x d, up: p x r) applied as W + (alpha/r) * up @ down

Checkpoint format (documented here, versioned): one JSON header line
{"format": "relpriv-checkpoint", "version": 1, ...} carrying the
architecture, mode, seed lineage and an ordered [name, shape] list, then
the parameter arrays concatenated raw as row-major little-endian float64
in exactly that order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from relpriv.errors import ConfigError, DataFormatError
from relpriv.graph import TokenSeq
from relpriv.rng import stream_rng

MODES = ("full", "adapter")


@dataclass
class LoraFactors:
    down: np.ndarray  # (rank, d_in)
    up: np.ndarray  # (d_out, rank)
    alpha: float

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.up @ self.down)


@dataclass
class DenseBlock:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    adapter: LoraFactors | None = None

    def effective_weight(self) -> np.ndarray:
        if self.adapter is None:
            return self.weight
        return self.weight + self.adapter.delta()


@dataclass
class EncoderParams:
    embed: np.ndarray  # (vocab_size, d_emb)
    blocks: list
    mode: str
    seed: int

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def layer_sizes(self) -> tuple:
        return (self.embed.shape[1],) + tuple(b.weight.shape[0] for b in self.blocks)

    @property
    def d_out(self) -> int:
        return self.blocks[-1].weight.shape[0]

    def trainable_groups(self) -> dict:
        """Ordered name -> array view of everything the optimizer may touch.

        Order is fixed and documented: "embed" first (full mode only), then
        per block either weight/bias or lora_down/lora_up.
        """
        groups: dict = {}
        if self.mode == "full":
            groups["embed"] = self.embed
            for i, blk in enumerate(self.blocks):
                groups[f"block{i}.weight"] = blk.weight
                groups[f"block{i}.bias"] = blk.bias
        else:
            for i, blk in enumerate(self.blocks):
                groups[f"block{i}.lora_down"] = blk.adapter.down
                groups[f"block{i}.lora_up"] = blk.adapter.up
        return groups

    def all_groups(self) -> dict:
        groups: dict = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            groups[f"block{i}.weight"] = blk.weight
            groups[f"block{i}.bias"] = blk.bias
            if blk.adapter is not None:
                groups[f"block{i}.lora_down"] = blk.adapter.down
                groups[f"block{i}.lora_up"] = blk.adapter.up
        return groups

    def copy(self) -> "EncoderParams":
        blocks = []
        for blk in self.blocks:
            adapter = None
            if blk.adapter is not None:
                adapter = LoraFactors(
                    down=blk.adapter.down.copy(),
                    up=blk.adapter.up.copy(),
                    alpha=blk.adapter.alpha,
                )
            blocks.append(
                DenseBlock(weight=blk.weight.copy(), bias=blk.bias.copy(), adapter=adapter)
            )
        return EncoderParams(embed=self.embed.copy(), blocks=blocks, mode=self.mode, seed=self.seed)


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the backward pass needs for one entity."""

    token_ids: np.ndarray  # (M,)
    length: int
    layer_values: tuple  # xs[0] embedded rows .. xs[L] final rows, each (M, d_l)
    pooled: np.ndarray  # (d_out,)


@dataclass
class LayerCache:
    """Stacked low-rank gradient factors for one dense block over one tuple.

    inputs (T, d_in) and out_grads (T, d_out) align row for row; the block's
    weight gradient is out_grads.T @ inputs and its bias gradient is the
    column sum of out_grads. In adapter mode the projected factors
    adapter_inputs = inputs @ down.T and adapter_out_grads = out_grads @ up
    are recorded too, so factor gradients never need the frozen weight.
    """

    inputs: np.ndarray
    out_grads: np.ndarray
    adapter_inputs: np.ndarray | None = None
    adapter_out_grads: np.ndarray | None = None
    adapter_scale: float | None = None


@dataclass
class LowRankGradCache:
    mode: str
    layers: list
    vocab_size: int
    d_emb: int
    embed_ids: np.ndarray | None = None  # (T,) token ids, full mode only
    embed_grads: np.ndarray | None = None  # (T, d_emb), full mode only
    n_entities: int = 0
    tokens_per_entity: int = 0

    def scalar_count(self) -> int:
        total = 0
        for layer in self.layers:
            total += layer.inputs.size + layer.out_grads.size
            if layer.adapter_inputs is not None:
                total += layer.adapter_inputs.size + layer.adapter_out_grads.size
        if self.embed_grads is not None:
            total += self.embed_grads.size + self.embed_ids.size
        return total


def init_params(
    vocab_size: int,
    layer_sizes,
    mode: str = "full",
    *,
    lora_rank: int = 4,
    lora_alpha: float = 16.0,
    seed: int = 0,
) -> EncoderParams:
    """Seeded initialisation: normal(0, 1/sqrt(fan_in)) weights, zero biases.

    In adapter mode the up factor starts at zero, so the adapted encoder is
    bit-identical to the frozen base at initialisation.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ConfigError("layer sizes need an embedding width and at least one block")
    if any(s < 1 for s in sizes) or vocab_size < 2:
        raise ConfigError("layer sizes and vocabulary size must be positive")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "adapter" and lora_rank < 1:
        raise ConfigError("adapter rank must be at least 1")

    rng = stream_rng(seed, "init")
    embed = rng.normal(0.0, 1.0 / np.sqrt(sizes[0]), size=(vocab_size, sizes[0]))
    blocks = []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        weight = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
        bias = np.zeros(d_out)
        adapter = None
        if mode == "adapter":
            down = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(lora_rank, d_in))
            up = np.zeros((d_out, lora_rank))
            adapter = LoraFactors(down=down, up=up, alpha=float(lora_alpha))
        blocks.append(DenseBlock(weight=weight, bias=bias, adapter=adapter))
    return EncoderParams(embed=embed, blocks=blocks, mode=mode, seed=seed)


def forward_values(params: EncoderParams, ids, lengths):
    """Stacked forward pass over rows of token ids.

    ids (n, M) int, lengths (n,). Returns (xs, mask, pooled) where xs[l] is
    the input to block l for l < L and xs[L] is the final per-token output,
    each (n, M, d_l); pooled is (n, d_out).
    """
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.max(initial=0) >= params.vocab_size:
        raise DataFormatError("token id out of vocabulary range")
    n_rows, m_tokens = ids.shape
    n_blocks = len(params.blocks)
    mask = np.arange(m_tokens)[None, :] < lengths[:, None]
    xs = [params.embed[ids]]
    for i, blk in enumerate(params.blocks):
        # one flat GEMM instead of n_rows small batched ones
        flat = xs[-1].reshape(n_rows * m_tokens, -1)
        out = flat @ blk.effective_weight().T
        out += blk.bias
        out = out.reshape(n_rows, m_tokens, -1)
        xs.append(np.tanh(out) if i < n_blocks - 1 else out)
    pooled = np.einsum("nmd,nm->nd", xs[-1], mask / lengths[:, None])
    return xs, mask, pooled


def backward_values(params: EncoderParams, xs, mask, lengths, pooled_grads):
    """Reverse pass matching forward_values.

    pooled_grads (n, d_out) is the loss gradient at the pooled embeddings.
    Returns (gs, embed_grads): gs[l] (n, M, p_l) is the gradient at block
    l's pre-activation output; embed_grads (n, M, d_emb) is the gradient at
    the embedded rows.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    n_rows, m_tokens = mask.shape
    n_blocks = len(params.blocks)
    dx = (mask / lengths[:, None])[..., None] * pooled_grads[:, None, :]
    gs = [None] * n_blocks
    for i in reversed(range(n_blocks)):
        g = dx if i == n_blocks - 1 else dx * (1.0 - xs[i + 1] ** 2)
        gs[i] = g
        flat = g.reshape(n_rows * m_tokens, -1)
        dx = (flat @ params.blocks[i].effective_weight()).reshape(n_rows, m_tokens, -1)
    return gs, dx


def encode(params: EncoderParams, tokens: TokenSeq):
    """Embed one entity; returns (pooled embedding, trace for backward)."""
    ids = np.asarray(tokens.ids, dtype=np.int64)
    xs, _, pooled = forward_values(params, ids[None, :], np.array([tokens.length]))
    trace = ForwardTrace(
        token_ids=ids.copy(),
        length=int(tokens.length),
        layer_values=tuple(x[0] for x in xs),
        pooled=pooled[0],
    )
    return trace.pooled, trace


def encode_entities(params: EncoderParams, tokens, lengths) -> np.ndarray:
    """Pooled embeddings for many entities at once; no traces kept."""
    _, _, pooled = forward_values(params, tokens, lengths)
    return pooled


def backward_tuple(params: EncoderParams, tup, loss_grads, traces) -> LowRankGradCache:
    """Assemble the per-tuple low-rank gradient cache from entity traces.

    loss_grads maps entity id -> gradient of the tuple loss w.r.t. that
    entity's pooled embedding; traces maps entity id -> its ForwardTrace
    under the same parameters. Entities shared between the positive and the
    negatives appear once: their combined loss gradient flows through the
    single shared trace.
    """
    entities = list(dict.fromkeys(tup.entities()))
    missing = [e for e in entities if e not in traces]
    if missing:
        raise ConfigError(f"missing forward trace for entity {missing[0]}")

    n_blocks = len(params.blocks)
    first = traces[entities[0]]
    m_tokens = first.token_ids.shape[0]
    xs = [
        np.stack([traces[e].layer_values[l] for e in entities])
        for l in range(n_blocks + 1)
    ]
    lengths = np.array([traces[e].length for e in entities], dtype=np.int64)
    mask = np.arange(m_tokens)[None, :] < lengths[:, None]
    pooled_grads = np.stack(
        [np.asarray(loss_grads.get(e, np.zeros(params.d_out))) for e in entities]
    )

    gs, embed_grads = backward_values(params, xs, mask, lengths, pooled_grads)

    layers = []
    for i in range(n_blocks):
        h_rows = xs[i].reshape(-1, xs[i].shape[-1])
        g_rows = gs[i].reshape(-1, gs[i].shape[-1])
        if params.mode == "adapter":
            adapter = params.blocks[i].adapter
            layers.append(
                LayerCache(
                    inputs=h_rows,
                    out_grads=g_rows,
                    adapter_inputs=h_rows @ adapter.down.T,
                    adapter_out_grads=g_rows @ adapter.up,
                    adapter_scale=adapter.scale,
                )
            )
        else:
            layers.append(LayerCache(inputs=h_rows, out_grads=g_rows))

    cache = LowRankGradCache(
        mode=params.mode,
        layers=layers,
        vocab_size=params.vocab_size,
        d_emb=params.embed.shape[1],
        n_entities=len(entities),
        tokens_per_entity=m_tokens,
    )
    if params.mode == "full":
        cache.embed_ids = np.concatenate([traces[e].token_ids for e in entities])
        cache.embed_grads = embed_grads.reshape(-1, params.embed.shape[1])
    return cache


_CHECKPOINT_FORMAT = "relpriv-checkpoint"
_CHECKPOINT_VERSION = 1


def save_checkpoint(params: EncoderParams, path: str) -> None:
    groups = params.all_groups()
    header = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "vocab_size": params.vocab_size,
        "layer_sizes": list(params.layer_sizes),
        "mode": params.mode,
        "seed": params.seed,
        "lora_rank": params.blocks[0].adapter.rank if params.mode == "adapter" else None,
        "lora_alpha": params.blocks[0].adapter.alpha if params.mode == "adapter" else None,
        "groups": [[name, list(arr.shape)] for name, arr in groups.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in groups.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> EncoderParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise DataFormatError(f"{path}: not a checkpoint file") from None
        if header.get("format") != _CHECKPOINT_FORMAT:
            raise DataFormatError(f"{path}: not a checkpoint file")
        if header.get("version") != _CHECKPOINT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported checkpoint version {header.get('version')}"
            )
        blob = fh.read()

    params = init_params(
        header["vocab_size"],
        header["layer_sizes"],
        header["mode"],
        lora_rank=header["lora_rank"] or 4,
        lora_alpha=header["lora_alpha"] or 16.0,
        seed=header["seed"],
    )
    groups = params.all_groups()
    names = [name for name, _ in header["groups"]]
    if names != list(groups.keys()):
        raise DataFormatError(f"{path}: checkpoint group layout does not match header")
    offset = 0
    for (name, shape) in header["groups"]:
        arr = groups[name]
        if list(arr.shape) != shape:
            raise DataFormatError(f"{path}: shape mismatch for group {name}")
        nbytes = arr.size * 8
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataFormatError(f"{path}: truncated checkpoint")
        arr[...] = np.frombuffer(chunk, dtype="<f8").reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise DataFormatError(f"{path}: trailing bytes after parameter blocks")
    return params
