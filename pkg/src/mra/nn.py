"""Small parameterized layers built on the tensor tape.

Layers hold their weights as named Tensors and expose them through
``params()`` so models can build flat name -> Tensor maps for the optimizer,
digests, and checkpointing.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (Tensor, concat, conv2d, gelu, layer_norm, matmul, reshape,
                     softmax, transpose)


def init_normal(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float32),
                  requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Module:
    """Base: children and direct parameters are discovered by attribute walk."""

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            key = f"{prefix}{attr}" if prefix == "" else f"{prefix}.{attr}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.params(key))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.params(f"{key}.{i}"))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        if zero_init or rng is None:
            self.weight = zeros((d_in, d_out))
        else:
            self.weight = init_normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.bias = zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = ones((d,))
        self.bias = zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Mlp(Module):
    """Two-layer MLP with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class CausalSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 causal: bool = True):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.causal = causal
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        n, d = x.shape
        h, dh = self.heads, self.d // self.heads

        def split(t: Tensor) -> Tensor:
            return transpose(reshape(t, (n, h, dh)), (1, 0, 2))  # (h, n, dh)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        att = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        if self.causal:
            mask = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
            att = att + Tensor(mask)
        y = matmul(softmax(att, axis=-1), v)  # (h, n, dh)
        y = reshape(transpose(y, (1, 0, 2)), (n, d))
        return self.wo(y)


class TransformerBlock(Module):
    """Pre-norm attention + MLP block over a (tokens, width) matrix."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 causal: bool = True, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = CausalSelfAttention(d, heads, rng, causal=causal)
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(d, mlp_ratio * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class ConvBlock(Module):
    """conv 3x3 -> layer norm over channels -> GELU, with optional stride."""

    def __init__(self, c_in: int, c_out: int, stride: int,
                 rng: np.random.Generator):
        self.stride = stride
        self.kernel = init_normal(rng, (3, 3, c_in, c_out),
                                  1.0 / math.sqrt(9 * c_in))
        self.norm = LayerNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.kernel, stride=self.stride, padding=1)
        return gelu(self.norm(y))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation of two h x w x c grids."""
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"spatial shapes differ: {a.shape} vs {b.shape}")
    return concat([a, b], axis=-1)
