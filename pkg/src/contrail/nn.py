"""Parameter containers and transformer building blocks on top of ``tensor``."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from contrail import tensor as T
from contrail.tensor import Tensor


class Module:
    """Holds named parameters and child modules, registered in attribute order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, m in self._children.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def cast(self, dtype) -> None:
        for t in self.parameters():
            t.data = t.data.astype(dtype)

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]))


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    # scaled Gaussian (variance 1/fan_in)
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.w = self.param("w", _init(rng, d_in, (d_in, d_out)))
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return T.add(y, self.b) if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.g = self.param("g", np.ones(d))
        self.b = self.param("b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, d, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, d))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention over (B, L, d) streams.

    ``key_mask`` is a boolean (B, Lk) array, True for keys that may be attended;
    ``attn_mask`` is a boolean (Lq, Lk) array applied to every batch row.
    The most recent attention weights are kept in ``last_weights`` (B, H, Lq, Lk).
    """

    def __init__(self, rng, d: int, heads: int = 1):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = self.child("q", Linear(rng, d, d))
        self.k = self.child("k", Linear(rng, d, d))
        self.v = self.child("v", Linear(rng, d, d))
        self.o = self.child("o", Linear(rng, d, d))
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        if self.heads == 1:
            return x
        h = self.heads
        return T.reshape(T.transpose(T.reshape(x, (b, l, h, d // h)), (0, 2, 1, 3)), (b * h, l, d // h))

    def _merge(self, x: Tensor, b: int) -> Tensor:
        if self.heads == 1:
            return x
        h = self.heads
        _, l, dh = x.shape
        return T.reshape(T.transpose(T.reshape(x, (b, h, l, dh)), (0, 2, 1, 3)), (b, l, h * dh))

    def __call__(self, xq: Tensor, xkv: Tensor, key_mask: np.ndarray | None = None,
                 attn_mask: np.ndarray | None = None) -> Tensor:
        b = xq.shape[0]
        d = xq.shape[-1]
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // self.heads))
        mask = None
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool)
            if self.heads > 1:
                km = np.repeat(km, self.heads, axis=0)
            mask = km[:, None, :]
        if attn_mask is not None:
            am = np.asarray(attn_mask, dtype=bool)[None]
            mask = am if mask is None else (mask & am)
        w = T.softmax(scores, mask=mask)
        self.last_weights = w.data.reshape(b, self.heads, *w.shape[1:])
        return self.o(self._merge(T.matmul(w, v), b))


class SelfAttentionBlock(Module):
    """Pre-norm transformer layer: x + attn(ln(x)); x + ffn(ln(x))."""

    def __init__(self, rng, d: int, heads: int, hidden: int):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.attn = self.child("attn", Attention(rng, d, heads))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.ffn = self.child("ffn", FeedForward(rng, d, hidden))

    def __call__(self, x: Tensor, key_mask=None, attn_mask=None) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h, key_mask, attn_mask))
        return T.add(x, self.ffn(self.ln2(x)))


class CrossAttentionBlock(Module):
    """Pre-norm cross-attention layer; only the query stream is updated."""

    def __init__(self, rng, d: int, heads: int, hidden: int):
        super().__init__()
        self.ln_q = self.child("ln_q", LayerNorm(d))
        self.ln_kv = self.child("ln_kv", LayerNorm(d))
        self.attn = self.child("attn", Attention(rng, d, heads))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.ffn = self.child("ffn", FeedForward(rng, d, hidden))

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        q = T.add(q, self.attn(self.ln_q(q), self.ln_kv(kv)))
        return T.add(q, self.ffn(self.ln2(q)))
