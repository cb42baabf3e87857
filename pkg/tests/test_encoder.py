import math

import numpy as np
import pytest

from relpriv.encoder import (
    DenseBlock,
    EncoderParams,
    backward_tuple,
    encode,
    encode_entities,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from relpriv.errors import ConfigError, DataFormatError
from relpriv.graph import TokenSeq
from relpriv.losses import tuple_objective

from conftest import make_tuple


def tokens(ids, length=None, width=None):
    ids = list(ids)
    width = width or len(ids)
    row = np.zeros(width, dtype=np.int64)
    row[: len(ids)] = ids
    return TokenSeq(ids=row, length=length if length is not None else len(ids))


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_params(20, (6, 5, 4), seed=3)
        b = init_params(20, (6, 5, 4), seed=3)
        assert np.array_equal(a.embed, b.embed)
        for ba, bb in zip(a.blocks, b.blocks):
            assert np.array_equal(ba.weight, bb.weight)
            assert np.array_equal(ba.bias, bb.bias)

    def test_weight_scale_tracks_fan_in(self):
        # 64 -> 256 weight matrix: 16384 entries of std 1/8
        params = init_params(10, (64, 256), seed=1)
        std = params.blocks[0].weight.std()
        assert abs(std - 0.125) <= 0.1 * 0.125

    def test_adapter_starts_as_identity_delta(self, small_graph):
        base = init_params(small_graph.vocab_size, (6, 5), "full", seed=7)
        lora = init_params(small_graph.vocab_size, (6, 5), "adapter", lora_rank=3, seed=7)
        seq = small_graph.token_seq(0)
        h_base, _ = encode(base, seq)
        h_lora, _ = encode(lora, seq)
        assert np.array_equal(h_base, h_lora)

    def test_trainable_groups_by_mode(self):
        full = init_params(10, (4, 4, 3), "full", seed=0)
        assert list(full.trainable_groups()) == [
            "embed",
            "block0.weight",
            "block0.bias",
            "block1.weight",
            "block1.bias",
        ]
        lora = init_params(10, (4, 4, 3), "adapter", lora_rank=2, seed=0)
        assert list(lora.trainable_groups()) == [
            "block0.lora_down",
            "block0.lora_up",
            "block1.lora_down",
            "block1.lora_up",
        ]

    def test_validation(self):
        with pytest.raises(ConfigError):
            init_params(10, (4,), seed=0)
        with pytest.raises(ConfigError):
            init_params(10, (4, 4), mode="adapter", lora_rank=0, seed=0)
        with pytest.raises(ConfigError):
            init_params(10, (4, 4), mode="other", seed=0)


class TestEncode:
    def test_zero_params_give_zero_embedding(self):
        params = init_params(8, (3, 4), seed=0)
        params.embed[:] = 0.0
        params.blocks[0].weight[:] = 0.0
        h, _ = encode(params, tokens([1, 2, 3]))
        assert np.array_equal(h, np.zeros(4))

    def test_identity_single_block_returns_embedding_row(self):
        params = init_params(8, (4, 4), seed=0)
        params.blocks[0].weight[:] = np.eye(4)
        params.blocks[0].bias[:] = 0.0
        h, _ = encode(params, tokens([5], width=1))
        assert np.allclose(h, params.embed[5], rtol=0, atol=0)

    def test_matches_scalar_recomputation(self):
        # independent pure-python forward pass, d=4, M=3, two blocks
        params = init_params(9, (4, 5, 4), seed=21)
        seq = tokens([2, 7, 4])
        h, _ = encode(params, seq)

        rows = [[float(params.embed[t, j]) for j in range(4)] for t in seq.ids]
        for bi, blk in enumerate(params.blocks):
            out_rows = []
            for row in rows:
                out = []
                for o in range(blk.weight.shape[0]):
                    acc = float(blk.bias[o])
                    for j in range(len(row)):
                        acc += float(blk.weight[o, j]) * row[j]
                    out.append(math.tanh(acc) if bi == 0 else acc)
                out_rows.append(out)
            rows = out_rows
        expected = [sum(r[j] for r in rows) / 3 for j in range(4)]
        assert np.abs(h - np.array(expected)).max() <= 1e-12

    def test_pure_function_bitwise(self, small_graph):
        params = init_params(small_graph.vocab_size, (5, 4), seed=2)
        seq = small_graph.token_seq(3)
        h1, t1 = encode(params, seq)
        h2, t2 = encode(params, seq)
        assert np.array_equal(h1, h2)
        for a, b in zip(t1.layer_values, t2.layer_values):
            assert np.array_equal(a, b)

    def test_extra_padding_never_changes_embedding(self):
        params = init_params(12, (4, 3), seed=5)
        short = tokens([3, 9, 1], width=4)
        longer = tokens([3, 9, 1], width=9)
        h1, _ = encode(params, short)
        h2, _ = encode(params, longer)
        assert np.array_equal(h1, h2)

    def test_out_of_vocab_rejected(self):
        params = init_params(6, (3, 3), seed=0)
        with pytest.raises(DataFormatError):
            encode(params, tokens([7]))

    def test_batch_encode_matches_single(self, small_graph):
        params = init_params(small_graph.vocab_size, (5, 4), seed=2)
        ids = np.array([0, 3, 9])
        batch = encode_entities(params, small_graph.tokens[ids], small_graph.lengths[ids])
        for i, ent in enumerate(ids):
            h, _ = encode(params, small_graph.token_seq(int(ent)))
            assert np.array_equal(batch[i], h)


class TestBackwardTuple:
    def test_zero_loss_grads_zero_cache(self, small_graph):
        params = init_params(small_graph.vocab_size, (5, 4), seed=2)
        tup = make_tuple((0, 1), 2, small_graph.n_entities)
        _, _, traces = tuple_objective(params, small_graph, tup)
        zero = {e: np.zeros(params.d_out) for e in tup.entities()}
        cache = backward_tuple(params, tup, zero, traces)
        for layer in cache.layers:
            assert not layer.out_grads.any()
        assert not cache.embed_grads.any()

    def test_single_token_outer_product(self):
        # one linear layer, one entity, one token: the weight gradient is
        # exactly the outer product of the loss grad and the embedding row
        params = init_params(6, (3, 2), seed=4)
        g = np.array([0.7, -1.3])

        from relpriv.graph import TextAttributedGraph

        graph = TextAttributedGraph(
            n_entities=3,
            tokens=np.array([[2], [3], [4]], dtype=np.int64),
            lengths=np.array([1, 1, 1]),
            relations=frozenset({(0, 1)}),
            vocab_size=6,
            max_tokens=1,
        )
        tup = make_tuple((0, 1), 1, 3)
        _, _, traces = tuple_objective(params, graph, tup)
        grads = {e: np.zeros(2) for e in tup.entities()}
        grads[0] = g
        cache = backward_tuple(params, tup, grads, traces)
        from relpriv.privacy import tuple_grad_outer

        gv = tuple_grad_outer(cache)
        expected = np.outer(g, params.embed[2])
        assert np.allclose(gv.groups["block0.weight"], expected, atol=1e-15)

    def test_missing_trace_rejected(self, small_graph):
        params = init_params(small_graph.vocab_size, (5, 4), seed=2)
        tup = make_tuple((0, 1), 2, small_graph.n_entities)
        _, grads, traces = tuple_objective(params, small_graph, tup)
        del traces[tup.negatives[0]]
        with pytest.raises(ConfigError, match="missing forward trace"):
            backward_tuple(params, tup, grads, traces)

    def test_cache_row_count(self, small_graph):
        params = init_params(small_graph.vocab_size, (5, 4), seed=2)
        tup = make_tuple((0, 1), 3, small_graph.n_entities)
        _, grads, traces = tuple_objective(params, small_graph, tup)
        cache = backward_tuple(params, tup, grads, traces)
        t_rows = 5 * small_graph.max_tokens  # anchor + mate + 3 negatives
        for layer in cache.layers:
            assert layer.inputs.shape[0] == t_rows
            assert layer.out_grads.shape[0] == t_rows

    def test_adapter_mode_has_no_embed_grads(self, small_graph):
        params = init_params(small_graph.vocab_size, (5, 4), "adapter", lora_rank=2, seed=2)
        tup = make_tuple((0, 1), 2, small_graph.n_entities)
        _, grads, traces = tuple_objective(params, small_graph, tup)
        cache = backward_tuple(params, tup, grads, traces)
        assert cache.embed_grads is None
        assert cache.layers[0].adapter_inputs is not None


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        for mode in ("full", "adapter"):
            params = init_params(11, (4, 6, 3), mode, lora_rank=2, seed=9)
            path = tmp_path / f"{mode}.bin"
            save_checkpoint(params, str(path))
            loaded = load_checkpoint(str(path))
            assert loaded.mode == params.mode
            assert loaded.layer_sizes == params.layer_sizes
            for name, arr in params.all_groups().items():
                assert np.array_equal(loaded.all_groups()[name], arr)

    def test_save_is_deterministic(self, tmp_path):
        params = init_params(11, (4, 3), seed=9)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(params, str(p1))
        save_checkpoint(params, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"\x00\x01\x02 not a checkpoint\n")
        with pytest.raises(DataFormatError):
            load_checkpoint(str(path))

    def test_rejects_truncated(self, tmp_path):
        params = init_params(11, (4, 3), seed=9)
        path = tmp_path / "a.bin"
        save_checkpoint(params, str(path))
        clipped = path.read_bytes()[:-16]
        path.write_bytes(clipped)
        with pytest.raises(DataFormatError, match="truncated"):
            load_checkpoint(str(path))
