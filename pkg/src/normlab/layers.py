"""Transformer building blocks on top of :mod:`normlab.tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, d: int, prefix: str = "ln") -> "LayerNormParams":
        return cls(Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.gain"),
                   Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.bias"))

    def tensors(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def xavier_init(shape, gain: float = 1.0, rng_seed=0) -> np.ndarray:
    """Glorot-uniform draw scaled by ``gain``.

    ``rng_seed`` is an int seed or an existing ``np.random.Generator``.
    """
    shape = tuple(shape)
    if len(shape) != 2:
        raise ContractError(f"xavier_init needs a 2-D shape, got {shape}")
    if gain < 0:
        raise ContractError("xavier_init gain must be nonnegative")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bound = gain * math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_attention(d: int, heads: int, rng: np.random.Generator, value_gain: float = 1.0,
                   prefix: str = "attn") -> AttentionParams:
    """Query/key use gain 1; value and output projections use ``value_gain``."""
    if d % heads:
        raise ConfigError(f"d_model={d} is not divisible by heads={heads}")

    def w(name, gain):
        return Tensor(xavier_init((d, d), gain, rng), requires_grad=True, name=f"{prefix}.{name}")

    def b(name):
        return Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.{name}")

    return AttentionParams(w("wq", 1.0), b("bq"), w("wk", 1.0), b("bk"),
                           w("wv", value_gain), b("bv"), w("wo", value_gain), b("bo"), heads)


def init_feed_forward(d: int, d_ffn: int, rng: np.random.Generator, gain: float = 1.0,
                      prefix: str = "ffn") -> FeedForwardParams:
    return FeedForwardParams(
        Tensor(xavier_init((d, d_ffn), gain, rng), requires_grad=True, name=f"{prefix}.w1"),
        Tensor(np.zeros(d_ffn), requires_grad=True, name=f"{prefix}.b1"),
        Tensor(xavier_init((d_ffn, d), gain, rng), requires_grad=True, name=f"{prefix}.w2"),
        Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.b2"),
    )


def layer_norm(x: Tensor, p: LayerNormParams, eps: float = LN_EPS) -> Tensor:
    return T.layer_norm(x, p.gain, p.bias, eps)


def causal_mask(n: int) -> np.ndarray:
    """``(n, n)`` boolean mask, true above the diagonal (future keys)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def padding_mask(ids: np.ndarray, pad: int) -> np.ndarray:
    """``(B, 1, 1, S)`` boolean mask, true at pad keys."""
    ids = np.asarray(ids)
    return (ids == pad)[:, None, None, :]


def attention(x_q: Tensor, x_kv: Tensor, p: AttentionParams, mask: np.ndarray | None = None,
              probs_out: list | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    Inputs are ``(B, S, d)`` (or ``(S, d)``). ``mask`` is boolean, true where
    the key is hidden, and broadcasts to ``(B, heads, Sq, Sk)``.
    """
    squeeze = x_q.ndim == 2
    if squeeze:
        x_q = T.reshape(x_q, (1,) + x_q.shape)
        x_kv = T.reshape(x_kv, (1,) + x_kv.shape)
    B, Sq, d = x_q.shape
    Sk = x_kv.shape[1]
    if x_kv.shape[0] != B or x_kv.shape[2] != d or p.wq.shape != (d, d):
        raise DimensionError(f"attention inputs {x_q.shape}/{x_kv.shape} do not match width {p.wq.shape}")
    H = p.heads
    if d % H:
        raise ConfigError(f"width {d} is not divisible by {H} heads")
    dh = d // H

    def split(x, w, b, n):
        y = T.add(T.matmul(x, w), b)
        return T.transpose(T.reshape(y, (B, n, H, dh)), (0, 2, 1, 3))

    q = split(x_q, p.wq, p.bq, Sq)
    k = split(x_kv, p.wk, p.bk, Sk)
    v = split(x_kv, p.wv, p.bv, Sk)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.masked_fill(scores, mask, -np.inf)
    probs = T.softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(probs)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, Sq, d))
    out = T.add(T.matmul(ctx, p.wo), p.bo)
    if squeeze:
        out = T.reshape(out, (Sq, d))
    return out


def feed_forward(x: Tensor, p: FeedForwardParams, hidden_out: list | None = None) -> Tensor:
    """``relu(x W1 + b1) W2 + b2``; the post-relu tensor is appended to ``hidden_out``."""
    if x.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"feed_forward input width {x.shape[-1]} != {p.w1.shape[0]}")
    h = T.relu(T.add(T.matmul(_at_least_2d(x), p.w1), p.b1))
    if hidden_out is not None:
        hidden_out.append(h)
    out = T.add(T.matmul(h, p.w2), p.b2)
    return out if x.ndim >= 2 else T.reshape(out, x.shape)


def _at_least_2d(x: Tensor) -> Tensor:
    return x if x.ndim >= 2 else T.reshape(x, (1,) + x.shape)


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    """Vanilla Transformer sin/cos position table, ``(max_len, d)``."""
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
