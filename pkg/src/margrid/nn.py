"""Network building blocks on top of the tensor engine.

Layers hold their parameters as ``Tensor`` objects and expose them through
``params()`` as a flat name-to-tensor dict, which is what the optimizer and
the checkpoint container consume.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.tmean(T.square(centered), axis=-1, keepdims=True)
    normed = T.div(centered, T.sqrt(T.add(var, eps)))
    return T.add(T.mul(normed, gamma), beta)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 0.02):
        self.weight = T.parameter(rng.normal(0.0, scale, size=(n_in, n_out)))
        self.bias = T.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class LayerNorm:
    def __init__(self, width: int):
        self.gamma = T.parameter(np.ones(width))
        self.beta = T.parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class AttentionBlock:
    """Pre-norm transformer block: self-attention then a tanh MLP, both residual.

    ``mask`` is an additive attention bias broadcast to (batch, heads, L, L);
    use 0 for allowed pairs and a large negative number for forbidden ones.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads != 0:
            raise T.ShapeError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.ln1 = LayerNorm(width)
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, 4 * width, rng)
        self.fc2 = Linear(4 * width, width, rng)

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        batch, length, width = x.shape
        h = self.ln1(x)

        def split(t: Tensor) -> Tensor:
            t = T.reshape(t, (batch, length, self.heads, self.head_dim))
            return T.transpose(t, (0, 2, 1, 3))

        q, k, v = split(self.wq(h)), split(self.wk(h)), split(self.wv(h))
        logits = T.div(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), np.sqrt(self.head_dim))
        if mask is not None:
            logits = T.add(logits, mask)
        att = T.softmax(logits, axis=-1)
        mixed = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
        mixed = T.reshape(mixed, (batch, length, width))
        x = T.add(x, self.wo(mixed))

        m = self.ln2(x)
        m = self.fc2(T.tanh(self.fc1(m)))
        return T.add(x, m)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.wq.params(f"{prefix}.wq"))
        out.update(self.wk.params(f"{prefix}.wk"))
        out.update(self.wv.params(f"{prefix}.wv"))
        out.update(self.wo.params(f"{prefix}.wo"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        out.update(self.fc1.params(f"{prefix}.fc1"))
        out.update(self.fc2.params(f"{prefix}.fc2"))
        return out
