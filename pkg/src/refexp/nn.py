"""Reusable layers: attention, gated linear units, feed-forward, transformer blocks.

Attention masks are boolean ndarrays that mark *disallowed* key positions and
broadcast against (batch, heads, queries, keys). Attention projections carry
no bias; plain linears do. Layers are post-norm (normalize after the residual
add).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, ShapeMismatch, Tensor

ATTN_MASK_BIAS = -1e9  # large enough that exp() underflows to exactly 0 in float32


class Module:
    """Base with parameter discovery over attributes (depth-first, stable order)."""

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Tensor):
                        out.append((f"{prefix}{name}.{i}", item))
                    elif isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def cast(self, dtype):
        """Cast parameters in place; used by the float64 gradient oracle."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


def init_weight(rng: np.random.Generator, shape, scale: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.w = init_weight(rng, (d_in, d_out))
        self.b = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        d_in = self.w.shape[0]
        if x.shape[-1] != d_in:
            raise ShapeMismatch(f"linear: input {x.shape} vs weight {self.w.shape}")
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, d_in)) if x.data.ndim != 2 else x
        y = T.matmul(flat, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        if x.data.ndim != 2:
            y = T.reshape(y, (*lead, self.w.shape[1]))
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-9):
        self.gamma = ones((dim,))
        self.beta = zeros((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; returns (output, attention weights)."""

    def __init__(self, rng, width: int, heads: int):
        if width % heads != 0:
            raise ShapeMismatch(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.width = width
        self.wq = init_weight(rng, (width, width))
        self.wk = init_weight(rng, (width, width))
        self.wv = init_weight(rng, (width, width))
        self.wo = init_weight(rng, (width, width))

    def _split(self, x: Tensor, b: int, s: int) -> Tensor:
        # (b*s, width) -> (b*heads, s, head_dim); 3-D batching keeps numpy's
        # batched matmul loop short
        dh = self.width // self.heads
        x = T.transpose(T.reshape(x, (b, s, self.heads, dh)), (0, 2, 1, 3))
        return T.reshape(x, (b * self.heads, s, dh))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: np.ndarray | None = None):
        if key.shape[:-1] != value.shape[:-1]:
            raise ShapeMismatch(f"key {key.shape} vs value {value.shape}")
        b, lq, _ = query.shape
        lk = key.shape[1]
        dh = self.width // self.heads
        q = self._split(T.matmul(T.reshape(query, (-1, self.width)), self.wq), b, lq)
        k = self._split(T.matmul(T.reshape(key, (-1, self.width)), self.wk), b, lk)
        v = self._split(T.matmul(T.reshape(value, (-1, self.width)), self.wv), b, lk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            full = np.broadcast_to(mask, (b, self.heads, lq, lk))
            if full.all(axis=-1).any():
                raise ContractViolation("attention: some query has every key masked")
            bias = np.where(full, ATTN_MASK_BIAS, 0.0).astype(scores.data.dtype)
            scores = T.add(scores, Tensor(bias.reshape(b * self.heads, lq, lk),
                                          dtype=scores.data.dtype))
        attn = T.softmax_lastaxis(scores)
        ctx = T.matmul(attn, v)  # (b*heads, lq, dh)
        merged = T.reshape(T.transpose(T.reshape(ctx, (b, self.heads, lq, dh)),
                                       (0, 2, 1, 3)), (b * lq, self.width))
        out = T.reshape(T.matmul(merged, self.wo), (b, lq, self.width))
        attn = T.reshape(attn, (b, self.heads, lq, lk))
        return out, attn


class GLU(Module):
    """sigmoid([z, q] W1) * ([z, q] W2), both maps from 2*width to width."""

    def __init__(self, rng, width: int):
        self.w1 = init_weight(rng, (2 * width, width))
        self.w2 = init_weight(rng, (2 * width, width))

    def __call__(self, z: Tensor, q: Tensor) -> Tensor:
        if z.shape != q.shape:
            raise ShapeMismatch(f"glu: {z.shape} vs {q.shape}")
        x = T.concat_last([z, q])
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1]))
        gate = T.sigmoid(T.matmul(flat, self.w1))
        val = T.matmul(flat, self.w2)
        return T.reshape(T.mul(gate, val), (*lead, self.w1.shape[1]))


class FeedForward(Module):
    def __init__(self, rng, width: int, hidden: int):
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerEncoderLayer(Module):
    def __init__(self, rng, width: int, heads: int, ffn_hidden: int):
        self.self_attn = MultiHeadAttention(rng, width, heads)
        self.ln1 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ffn_hidden)
        self.ln2 = LayerNorm(width)

    def __call__(self, x: Tensor, self_mask: np.ndarray | None = None):
        h, attn = self.self_attn(x, x, x, self_mask)
        x = self.ln1(T.add(x, h))
        x = self.ln2(T.add(x, self.ffn(x)))
        return x, {"self": attn}


class TransformerDecoderLayer(Module):
    """Self-attention, cross-attention into a memory sequence, feed-forward."""

    def __init__(self, rng, width: int, heads: int, ffn_hidden: int):
        self.self_attn = MultiHeadAttention(rng, width, heads)
        self.ln1 = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(rng, width, heads)
        self.ln2 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ffn_hidden)
        self.ln3 = LayerNorm(width)

    def __call__(self, x: Tensor, memory: Tensor, self_mask: np.ndarray | None = None,
                 memory_mask: np.ndarray | None = None):
        h, attn_s = self.self_attn(x, x, x, self_mask)
        x = self.ln1(T.add(x, h))
        h, attn_c = self.cross_attn(x, memory, memory, memory_mask)
        x = self.ln2(T.add(x, h))
        x = self.ln3(T.add(x, self.ffn(x)))
        return x, {"self": attn_s, "cross": attn_c}
