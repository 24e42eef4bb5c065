import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reportgen import autodiff as ad
from reportgen.autodiff import Tensor, parameter
from reportgen.config import DecoderConfig
from reportgen.decoder import (
    Decoder,
    attention,
    causal_mask,
    decode_logits,
    decoder_layer,
    ffn,
    multi_head,
    positional_encoding,
)
from reportgen.errors import ConfigError, ContractError, DimensionError, LengthError, VocabularyError
from reportgen.tokenizer import CLS_ID


def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_softmax(s):
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_multi_head(q_in, kv_in, p, n_heads, causal):
    d = p["wq"].shape[0]
    dh = d // n_heads
    heads = []
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        q, k, v = q_in @ p["wq"][:, cols], kv_in @ p["wk"][:, cols], kv_in @ p["wv"][:, cols]
        s = q @ k.T / math.sqrt(dh)
        if causal:
            s = s + causal_mask(len(q_in))
        heads.append(np_softmax(s) @ v)
    return np.concatenate(heads, axis=-1) @ p["wo"]


def small_cfg(**kw):
    base = dict(d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=12, vocab_size=7, dropout_p=0.0)
    base.update(kw)
    return DecoderConfig(**base)


def layer_params(decoder, i=0):
    prefix = f"decoder.layers.{i}."
    return {k[len(prefix):]: v for k, v in decoder.params.items() if k.startswith(prefix)}


class TestPositionalEncoding:
    def test_origin(self):
        pe = positional_encoding(4, 6)
        assert not pe[0, 0::2].any()
        assert (pe[0, 1::2] == 1.0).all()

    def test_first_entry(self):
        assert abs(positional_encoding(2, 4)[1, 0] - 0.841471) < 1e-6

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            positional_encoding(4, 5)

    @given(st.integers(1, 60), st.integers(1, 16))
    def test_unit_pairs(self, max_len, half):
        pe = positional_encoding(max_len, 2 * half)
        np.testing.assert_allclose(pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2, 1.0, atol=1e-12)


class TestAttention:
    def test_single_key(self):
        S = np.array([[3.0, -1.0, 2.0]])
        out = attention(Tensor(np.random.default_rng(0).normal(size=(4, 2))), Tensor(np.ones((1, 2))), Tensor(S))
        np.testing.assert_allclose(out.data, np.repeat(S, 4, axis=0), atol=1e-15)

    def test_orthogonal_queries_average_values(self):
        P = Tensor(np.array([[0.0, 1.0]]))
        R = Tensor(np.array([[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]]))
        S = np.arange(6.0).reshape(3, 2)
        np.testing.assert_allclose(attention(P, R, Tensor(S)).data, S.mean(0, keepdims=True), atol=1e-15)

    def test_hand_case(self):
        S = np.array([[1.0, 2.0], [3.0, 4.0]])
        out, w = attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor(S), return_weights=True)
        a = math.exp(1 / math.sqrt(2))
        expected_w = np.array([a / (a + 1), 1 / (a + 1)])
        np.testing.assert_allclose(w[0], expected_w, atol=1e-15)
        np.testing.assert_allclose(out.data[0], expected_w @ S, atol=1e-15)

    def test_mismatched_keys_values(self):
        with pytest.raises(DimensionError):
            attention(Tensor(np.ones((1, 2))), Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))))

    def test_fully_masked_row(self):
        mask = np.array([[-np.inf, -np.inf], [0.0, 0.0]])
        with pytest.raises(ContractError):
            attention(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), mask)

    def test_causal_rows(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(5, 3)))
        _, w = attention(x, x, x, causal_mask(5), return_weights=True)
        assert not np.triu(w, k=1).any()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


class TestMultiHead:
    def params(self, d, rng, **fixed):
        p = {k: Tensor(rng.normal(size=(d, d))) for k in ("wq", "wk", "wv", "wo")}
        p.update({k: Tensor(v) for k, v in fixed.items()})
        return p

    def test_one_head_identity_projections(self):
        rng = np.random.default_rng(0)
        eye = np.eye(4)
        P, R = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
        p = self.params(4, rng, wq=eye, wk=eye, wv=eye, wo=eye)
        np.testing.assert_allclose(multi_head(P, R, R, None, p, 1).data, attention(P, R, R).data, atol=1e-15)

    def test_zero_output_projection(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 4)))
        assert not multi_head(x, x, x, None, self.params(4, rng, wo=np.zeros((4, 4))), 2).data.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_per_head_loop(self, seed):
        rng = np.random.default_rng(seed)
        P, R = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
        p = self.params(4, rng)
        got = multi_head(Tensor(P), Tensor(R), Tensor(R), None, p, 2).data
        ref = np_multi_head(P, R, {k: v.data for k, v in p.items()}, 2, causal=False)
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_indivisible(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 6)))
        with pytest.raises(ConfigError):
            multi_head(x, x, x, None, self.params(6, rng), 4)


class TestFfn:
    def test_zero_weights(self):
        c2 = np.array([0.5, -1.0])
        out = ffn(Tensor(np.ones((3, 2))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)),
                  Tensor(np.zeros((4, 2))), Tensor(c2))
        np.testing.assert_array_equal(out.data, np.tile(c2, (3, 1)))

    def test_hand_case(self):
        # z=[1,2]: hidden = relu([1+4, 2-2] + [0,1]) = [5, 1]; out = [5, 1] @ I + [1, 1]
        out = ffn(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0], [2.0, -1.0]]), Tensor([0.0, 1.0]),
                  Tensor(np.eye(2)), Tensor([1.0, 1.0]))
        assert out.data.tolist() == [[6.0, 2.0]]

    def test_rows_independent(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(5, 3))
        w = [Tensor(rng.normal(size=s)) for s in ((3, 6), (6,), (6, 3), (3,))]
        perm = rng.permutation(5)
        np.testing.assert_allclose(ffn(Tensor(z[perm]), *w).data, ffn(Tensor(z), *w).data[perm], atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ffn(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(5)),
                Tensor(np.ones((5, 3))), Tensor(np.ones(3)))


class TestDecoderLayer:
    def test_zero_sublayers_stack_three_norms(self):
        cfg = small_cfg()
        dec = Decoder(cfg, rng=np.random.default_rng(0))
        p = layer_params(dec)
        rng = np.random.default_rng(1)
        for k, t in p.items():
            if "norm" in k:
                t.data[...] = rng.normal(size=t.shape)
            else:
                t.data[...] = 0.0
        x = rng.normal(size=(3, 8))
        out = decoder_layer(Tensor(x), Tensor(rng.normal(size=(4, 8))), cfg, p).data
        ref = x
        for n in ("norm1", "norm2", "norm3"):
            ref = np_layer_norm(ref, p[f"{n}.gain"].data, p[f"{n}.bias"].data)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_scripted_composition(self):
        cfg = small_cfg(d_model=4, n_heads=2, d_ff=6)
        dec = Decoder(cfg, rng=np.random.default_rng(3))
        p = {k: v.data for k, v in layer_params(dec).items()}
        rng = np.random.default_rng(2)
        for k in p:
            p[k] = p[k] + rng.normal(scale=0.1, size=p[k].shape)  # break the ones/zeros symmetry
        x, mem = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        sub = lambda name: {w: p[f"{name}.{w}"] for w in ("wq", "wk", "wv", "wo")}
        h = np_layer_norm(x + np_multi_head(x, x, sub("self_attn"), 2, True), p["norm1.gain"], p["norm1.bias"])
        h = np_layer_norm(h + np_multi_head(h, mem, sub("cross_attn"), 2, False), p["norm2.gain"], p["norm2.bias"])
        f = np.maximum(h @ p["ffn.v1"] + p["ffn.c1"], 0) @ p["ffn.v2"] + p["ffn.c2"]
        ref = np_layer_norm(h + f, p["norm3.gain"], p["norm3.bias"])
        got = decoder_layer(Tensor(x), Tensor(mem), cfg, {k: Tensor(v) for k, v in p.items()}).data
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_self_attention_is_causal(self):
        cfg = small_cfg()
        dec = Decoder(cfg, rng=np.random.default_rng(0))
        p = layer_params(dec)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 8))
        y = x.copy()
        y[2:] += rng.normal(size=(2, 8))
        run = lambda a: multi_head(Tensor(a), Tensor(a), Tensor(a), causal_mask(4),
                                   {k[10:]: v for k, v in p.items() if k.startswith("self_attn.")}, 2).data
        np.testing.assert_array_equal(run(x)[:2], run(y)[:2])

    def test_too_long(self):
        cfg = small_cfg(max_len=3)
        dec = Decoder(cfg, rng=np.random.default_rng(0))
        with pytest.raises(LengthError):
            decoder_layer(Tensor(np.ones((4, 8))), Tensor(np.ones((2, 8))), cfg, layer_params(dec))


@pytest.fixture(scope="module")
def decoder():
    return Decoder(small_cfg(n_layers=2), rng=np.random.default_rng(7))


@pytest.fixture(scope="module")
def memory():
    return Tensor(np.random.default_rng(8).normal(size=(5, 8)))


class TestDecodeLogits:
    def test_shape(self, decoder, memory):
        assert decode_logits([CLS_ID, 4, 5], memory, decoder.cfg, decoder.params).shape == (3, 7)

    def test_batched_matches_single(self, decoder, memory):
        ids = np.array([[CLS_ID, 4, 5], [CLS_ID, 6, 2]])
        batch = decoder.logits(ids, memory).data
        for row in range(2):
            np.testing.assert_allclose(batch[row], decoder.logits(ids[row], memory).data[0], atol=1e-12)

    def test_deterministic(self, memory):
        a = Decoder(small_cfg(), rng=np.random.default_rng(1)).logits([CLS_ID, 4], memory).data
        b = Decoder(small_cfg(), rng=np.random.default_rng(1)).logits([CLS_ID, 4], memory).data
        np.testing.assert_array_equal(a, b)

    def test_unknown_token(self, decoder, memory):
        with pytest.raises(VocabularyError):
            decoder.logits([CLS_ID, 99], memory)

    def test_too_long(self, decoder, memory):
        with pytest.raises(LengthError):
            decoder.logits([CLS_ID] * 13, memory)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=2, max_size=10), st.data())
    def test_suffix_changes_leave_prefix_bit_identical(self, decoder, memory, tail, data):
        ids = [CLS_ID] + tail
        t = data.draw(st.integers(1, len(ids) - 1))
        changed = ids[:t] + data.draw(st.lists(st.integers(0, 6), min_size=len(ids) - t, max_size=len(ids) - t))
        a = decoder.logits(ids, memory).data[0, :t]
        b = decoder.logits(changed, memory).data[0, :t]
        np.testing.assert_array_equal(a, b)

    def test_attention_rows(self, decoder, memory):
        record = []
        decoder.logits([CLS_ID, 4, 5, 6], memory, record=record)
        assert len(record) == 4
        for name, w in record:
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)
            if name.endswith("self"):
                assert not np.triu(w, k=1).any()

    def test_dropout_only_in_training(self, memory):
        dec = Decoder(small_cfg(dropout_p=0.5), rng=np.random.default_rng(0))
        ids = [CLS_ID, 4, 5]
        eval_a = dec.logits(ids, memory).data
        np.testing.assert_array_equal(eval_a, dec.logits(ids, memory).data)
        train = dec.logits(ids, memory, training=True, rng=np.random.default_rng(0)).data
        assert not np.allclose(train, eval_a)


def test_gradient_check_micro_decoder():
    cfg = small_cfg()
    dec = Decoder(cfg, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    memory = parameter(rng.normal(size=(3, 8)))
    weights = rng.normal(size=(4, 7))
    f = lambda: ad.tsum(ad.mul(dec.logits([CLS_ID, 4, 5, 6], memory), Tensor(weights[None])))
    params = dict(dec.params, memory=memory)
    result = ad.grad_check(f, params, eps=1e-6, max_entries=12)
    assert result.max_error < 1e-4, result.worst()
