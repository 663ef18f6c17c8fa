"""Network blocks against direct numpy reimplementations."""

import numpy as np

from margrid import tensor as T
from margrid.nn import AttentionBlock, LayerNorm, Linear, layer_norm


def test_linear_shapes_and_values():
    rng = np.random.default_rng(3)
    lin = Linear(6, 4, rng)
    x = rng.standard_normal((2, 5, 6))
    out = lin(T.constant(x)).numpy()
    want = x @ lin.weight.data + lin.bias.data
    assert out.shape == (2, 5, 4)
    assert np.array_equal(out, want)


def test_layer_norm_standardizes_rows():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((7, 16)) * 3.0 + 1.5
    ln = LayerNorm(16)
    out = ln(T.constant(x)).numpy()
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_matches_direct_formula():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 8))
    gamma = T.parameter(rng.standard_normal(8))
    beta = T.parameter(rng.standard_normal(8))
    out = layer_norm(T.constant(x), gamma, beta).numpy()
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    want = (x - mu) / np.sqrt(var + 1e-12) * gamma.data + beta.data
    assert np.allclose(out, want, atol=1e-12, rtol=0.0)


def _attention_oracle(block: AttentionBlock, x: np.ndarray,
                      bias: np.ndarray) -> np.ndarray:
    """Pre-norm attention with additive bias plus MLP, in plain numpy."""

    def ln(v, gamma, beta):
        mu = v.mean(axis=-1, keepdims=True)
        var = v.var(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-12) * gamma + beta

    b, n, w = x.shape
    heads = block.heads
    hd = w // heads
    h = ln(x, block.ln1.gamma.data, block.ln1.beta.data)
    q = h @ block.wq.weight.data + block.wq.bias.data
    k = h @ block.wk.weight.data + block.wk.bias.data
    v = h @ block.wv.weight.data + block.wv.bias.data

    def split(m):
        return m.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)

    q, k, v = split(q), split(k), split(v)
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    logits = logits + bias
    weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights = weights / weights.sum(axis=-1, keepdims=True)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, w)
    x = x + (mixed @ block.wo.weight.data + block.wo.bias.data)

    h = ln(x, block.ln2.gamma.data, block.ln2.beta.data)
    m = h @ block.fc1.weight.data + block.fc1.bias.data
    m = np.tanh(m)
    m = m @ block.fc2.weight.data + block.fc2.bias.data
    return x + m


def test_attention_block_matches_numpy_oracle():
    rng = np.random.default_rng(6)
    block = AttentionBlock(width=32, heads=4, rng=rng)
    x = rng.standard_normal((2, 9, 32))
    allowed = rng.random((2, 9, 9)) < 0.6
    allowed |= np.eye(9, dtype=bool)[None]
    bias = np.where(allowed[:, None, :, :], 0.0, -1e30)
    out = block(T.constant(x), T.constant(bias)).numpy()
    want = _attention_oracle(block, x, bias)
    assert np.allclose(out, want, atol=1e-10, rtol=0.0)


def test_attention_block_no_mask_means_dense():
    """Omitting the bias equals passing an all-zero bias."""
    rng = np.random.default_rng(8)
    block = AttentionBlock(width=16, heads=2, rng=rng)
    x = rng.standard_normal((3, 6, 16))
    dense = block(T.constant(x)).numpy()
    zero = block(T.constant(x), T.constant(np.zeros((3, 1, 6, 6)))).numpy()
    assert np.array_equal(dense, zero)


def test_attention_mask_blocks_information_flow():
    """A token attending only to itself ignores every other token's value."""
    rng = np.random.default_rng(7)
    block = AttentionBlock(width=16, heads=2, rng=rng)
    x = rng.standard_normal((1, 5, 16))
    bias = np.where(np.eye(5, dtype=bool)[None, None], 0.0, -1e30)
    base = block(T.constant(x), T.constant(bias)).numpy()
    x2 = x.copy()
    x2[0, 3] += 10.0
    moved = block(T.constant(x2), T.constant(bias)).numpy()
    untouched = [0, 1, 2, 4]
    assert np.array_equal(base[0, untouched], moved[0, untouched])
    assert not np.array_equal(base[0, 3], moved[0, 3])
