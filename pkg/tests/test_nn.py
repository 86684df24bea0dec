"""Layer contracts: attention mask semantics and normalization, gate algebra,
encoder/decoder equivalence, gradient gates through composites."""

import numpy as np
import pytest

from refexp import nn
from refexp import tensor as T
from refexp.nn import (GLU, FeedForward, MultiHeadAttention, TransformerDecoderLayer,
                       TransformerEncoderLayer)
from refexp.tensor import ContractViolation, ShapeMismatch, Tape, Tensor, backward, gradcheck


def make_mha(width=8, heads=2, seed=0):
    return MultiHeadAttention(np.random.default_rng(seed), width, heads)


def test_width_must_divide_heads():
    with pytest.raises(ShapeMismatch):
        make_mha(width=6, heads=4)


def test_identical_keys_give_uniform_attention(rng):
    mha = make_mha()
    q = Tensor(rng.normal(size=(1, 3, 8)).astype(np.float32))
    kv = Tensor(np.tile(rng.normal(size=(1, 1, 8)).astype(np.float32), (1, 5, 1)))
    out, attn = mha(q, kv, kv)
    np.testing.assert_allclose(attn.data, 0.2, atol=1e-6)
    # output equals the projected value mean at every query position
    np.testing.assert_allclose(out.data[0, 0], out.data[0, 1], atol=1e-6)


def test_attention_rows_sum_to_one(rng):
    mha = make_mha()
    x = Tensor(rng.normal(size=(2, 4, 8)).astype(np.float32))
    _, attn = mha(x, x, x)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)
    assert (attn.data >= 0).all()


def test_causal_mask_zeroes_future(rng):
    mha = make_mha()
    x = Tensor(rng.normal(size=(1, 5, 8)).astype(np.float32))
    mask = np.triu(np.ones((5, 5), dtype=bool), k=1)[None, None]
    _, attn = mha(x, x, x, mask)
    future = np.triu(np.ones((5, 5), dtype=bool), k=1)
    assert (attn.data[0, :, future] == 0).all()


def test_dominant_key_saturates(rng):
    width, heads = 4, 1
    mha = MultiHeadAttention(np.random.default_rng(0), width, heads)
    # make projections identity so the score is the raw dot product
    mha.wq.data = np.eye(width, dtype=np.float32)
    mha.wk.data = np.eye(width, dtype=np.float32)
    q = Tensor(np.array([[[1.0, 0, 0, 0]]], dtype=np.float32))
    keys = np.zeros((1, 3, width), dtype=np.float32)
    keys[0, 1, 0] = 2 * 20.0 + 1.0  # dot product +20 (after 1/sqrt(4) scaling) above others
    k = Tensor(keys)
    _, attn = mha(q, k, k)
    assert attn.data[0, 0, 0, 1] > 0.999


def test_fully_masked_query_raises(rng):
    mha = make_mha()
    x = Tensor(rng.normal(size=(1, 3, 8)).astype(np.float32))
    mask = np.zeros((1, 1, 3, 3), dtype=bool)
    mask[0, 0, 1, :] = True
    with pytest.raises(ContractViolation):
        mha(x, x, x, mask)


def test_key_value_length_mismatch(rng):
    mha = make_mha()
    x = Tensor(rng.normal(size=(1, 3, 8)).astype(np.float32))
    bad = Tensor(rng.normal(size=(1, 4, 8)).astype(np.float32))
    with pytest.raises(ShapeMismatch):
        mha(x, x, bad)


# ---------------------------------------------------------------------------
# GLU
# ---------------------------------------------------------------------------

def test_glu_zero_gate_weight(rng):
    glu = GLU(np.random.default_rng(0), 4)
    glu.w1.data = np.zeros_like(glu.w1.data)
    z = Tensor(rng.normal(size=(1, 2, 4)).astype(np.float32))
    q = Tensor(rng.normal(size=(1, 2, 4)).astype(np.float32))
    out = glu(z, q)
    cat = np.concatenate([z.data, q.data], axis=-1)
    np.testing.assert_allclose(out.data, 0.5 * (cat @ glu.w2.data), rtol=1e-5, atol=1e-6)


def test_glu_zero_value_weight(rng):
    glu = GLU(np.random.default_rng(0), 4)
    glu.w2.data = np.zeros_like(glu.w2.data)
    z = Tensor(rng.normal(size=(1, 2, 4)).astype(np.float32))
    out = glu(z, z)
    np.testing.assert_array_equal(out.data, np.zeros_like(out.data))


def test_glu_hand_value():
    glu = GLU(np.random.default_rng(0), 1)
    glu.w1.data = np.array([[1.0], [0.0]], dtype=np.float32)
    glu.w2.data = np.array([[0.0], [1.0]], dtype=np.float32)
    out = glu(Tensor([[[1.0]]]), Tensor([[[1.0]]]))
    np.testing.assert_allclose(out.data, [[[0.7310586]]], rtol=1e-6)


def test_glu_width_mismatch(rng):
    glu = GLU(np.random.default_rng(0), 4)
    with pytest.raises(ShapeMismatch):
        glu(Tensor(rng.normal(size=(1, 2, 4))), Tensor(rng.normal(size=(1, 3, 4))))


# ---------------------------------------------------------------------------
# transformer layers
# ---------------------------------------------------------------------------

def test_layer_shapes_preserved(rng):
    enc = TransformerEncoderLayer(np.random.default_rng(0), 8, 2, 16)
    dec = TransformerDecoderLayer(np.random.default_rng(1), 8, 2, 16)
    x = Tensor(rng.normal(size=(2, 5, 8)).astype(np.float32))
    mem = Tensor(rng.normal(size=(2, 7, 8)).astype(np.float32))
    out_e, _ = enc(x)
    out_d, _ = dec(x, mem)
    assert out_e.shape == x.shape and out_d.shape == x.shape


def test_decoder_with_zeroed_cross_matches_encoder(rng):
    enc = TransformerEncoderLayer(np.random.default_rng(3), 8, 2, 16)
    dec = TransformerDecoderLayer(np.random.default_rng(4), 8, 2, 16)
    # share the self-attention, feed-forward and norm weights
    dec.self_attn = enc.self_attn
    dec.ln1 = enc.ln1
    dec.ffn = enc.ffn
    dec.ln3 = enc.ln2
    dec.cross_attn.wo.data = np.zeros_like(dec.cross_attn.wo.data)
    x = Tensor(rng.normal(size=(2, 5, 8)).astype(np.float32))
    mem = Tensor(rng.normal(size=(2, 6, 8)).astype(np.float32))
    out_e, _ = enc(x)
    out_d, _ = dec(x, mem)
    np.testing.assert_allclose(out_d.data, out_e.data, atol=1e-6)


def test_two_layer_stack_gradients(rng):
    layers = [TransformerEncoderLayer(np.random.default_rng(s), 6, 2, 8) for s in (0, 1)]
    x0 = rng.normal(size=(1, 3, 6))
    w = np.random.default_rng(9).normal(size=(1, 3, 6))

    def fn(ts):
        x = ts[0]
        for layer in layers:
            x, _ = layer(x)
        return T.sum_(T.mul(x, Tensor(w, dtype=x.data.dtype)))

    for layer in layers:
        layer.cast(np.float32)
    err = gradcheck(fn, [x0])
    assert err < 1e-4


def test_mha_parameter_gradients(rng):
    mha = make_mha(width=4, heads=2, seed=5)
    x0 = rng.normal(size=(1, 3, 4))
    w = np.random.default_rng(8).normal(size=(1, 3, 4))

    def fn(ts):
        mha.wq, mha.wk, mha.wv, mha.wo = ts[1], ts[2], ts[3], ts[4]
        out, _ = mha(ts[0], ts[0], ts[0])
        return T.sum_(T.mul(out, Tensor(w, dtype=out.data.dtype)))

    inputs = [x0] + [p.data.astype(np.float64) for p in (mha.wq, mha.wk, mha.wv, mha.wo)]
    err = gradcheck(fn, inputs)
    assert err < 1e-4


def test_named_parameters_stable_and_complete():
    dec = TransformerDecoderLayer(np.random.default_rng(0), 8, 2, 16)
    names = [n for n, _ in dec.named_parameters()]
    assert names == [n for n, _ in dec.named_parameters()]
    assert "self_attn.wq" in names and "ffn.fc1.w" in names and "ln3.gamma" in names
    assert len(names) == len(set(names))
