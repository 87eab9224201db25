"""Encoder-decoder Transformer assembled from :mod:`layers` and a :class:`NormStrategy`."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .layers import (
    LN_EPS,
    AttentionParams,
    FeedForwardParams,
    LayerNormParams,
    attention,
    causal_mask,
    feed_forward,
    init_attention,
    init_feed_forward,
    layer_norm,
    padding_mask,
    sinusoidal_positions,
    xavier_init,
)
from .strategies import NormStrategy, sublayer_apply
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
N_RESERVED = 3


@dataclass(frozen=True)
class ModelConfig:
    N: int = 6
    M: int = 6
    d_model: int = 512
    d_ffn: int = 2048
    heads: int = 8
    vocab_size: int = 16
    max_len: int = 16
    strategy: NormStrategy = field(default_factory=NormStrategy)
    dropout: float = 0.0
    seed: int = 0
    share_embeddings: bool = True
    tie_output: bool = True
    ln_eps: float = LN_EPS

    def __post_init__(self):
        for name in ("N", "M", "d_model", "d_ffn", "heads", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab_size must exceed the {N_RESERVED} reserved tokens")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def num_sublayers(self) -> int:
        return 2 * self.N + 3 * self.M


@dataclass
class Sublayer:
    index: int
    side: str
    kind: str  # self_attn | cross_attn | ffn
    layer: int
    params: AttentionParams | FeedForwardParams
    ln: LayerNormParams

    @property
    def prefix(self) -> str:
        return f"{'enc' if self.side == 'encoder' else 'dec'}.{self.layer}.{self.kind}"

    def tensors(self) -> dict[str, Tensor]:
        return self.params.tensors()


@dataclass
class Context:
    """Per-forward state shared by every sublayer call."""

    t: int
    src_mask: np.ndarray
    self_mask: np.ndarray
    memory: Tensor | None = None
    train_mode: bool = False
    rng: np.random.Generator | None = None
    dropout: float = 0.0
    ffn_hidden: list | None = None


@dataclass
class ForwardOutput:
    logits: Tensor
    enc_states: list  # x_0 .. x_{2N}; x_l is the input of encoder sublayer l
    dec_states: list  # y_0 .. y_{3M}
    memory: Tensor
    ffn_hidden: list  # post-relu tensor of each ffn sublayer, model order
    context: Context

    @property
    def sublayer_outputs(self) -> list:
        return self.enc_states[1:] + self.dec_states[1:]

    @property
    def sublayer_inputs(self) -> list:
        return self.enc_states[:-1] + self.dec_states[:-1]


Combine = Callable[[Sublayer, Tensor, Callable[[Tensor], Tensor], int], Tensor]


class Model:
    """Parameters plus the forward pass. Parameters are leaf tensors in ``params``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], sublayers: list[Sublayer],
                 final_ln: dict[str, LayerNormParams]):
        self.cfg = cfg
        self.params = params
        self.sublayers = sublayers
        self.final_ln = final_ln
        self.positions = sinusoidal_positions(cfg.max_len, cfg.d_model)

    @property
    def num_sublayers(self) -> int:
        return len(self.sublayers)

    @property
    def encoder_sublayers(self) -> list[Sublayer]:
        return [s for s in self.sublayers if s.side == "encoder"]

    @property
    def decoder_sublayers(self) -> list[Sublayer]:
        return [s for s in self.sublayers if s.side == "decoder"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def with_strategy(self, strategy: NormStrategy) -> "Model":
        """Same parameter tensors, different combination rule."""
        if (strategy.kind == "preln") != (self.cfg.strategy.kind == "preln"):
            raise ConfigError("cannot switch between pre-LN and post-LN families on a built model")
        return Model(replace(self.cfg, strategy=strategy), self.params, self.sublayers, self.final_ln)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.astype("<f8").tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------

    def _embed(self, name: str, ids: np.ndarray, ctx: Context) -> Tensor:
        d = self.cfg.d_model
        x = T.scale(T.embed_lookup(self.params[name], ids), math.sqrt(d))
        x = T.add(x, Tensor(self.positions[: ids.shape[1]]))
        if ctx.train_mode:
            x = T.dropout(x, ctx.dropout, ctx.rng)
        return x

    def branch(self, sl: Sublayer, ctx: Context) -> Callable[[Tensor], Tensor]:
        """The sublayer function F(.; theta) including its output dropout."""

        def f(x: Tensor) -> Tensor:
            if sl.kind == "self_attn":
                mask = ctx.src_mask if sl.side == "encoder" else ctx.self_mask
                y = attention(x, x, sl.params, mask)
            elif sl.kind == "cross_attn":
                y = attention(x, ctx.memory, sl.params, ctx.src_mask)
            else:
                y = feed_forward(x, sl.params, ctx.ffn_hidden)
            if ctx.train_mode:
                y = T.dropout(y, ctx.dropout, ctx.rng)
            return y

        return f

    def apply_sublayer(self, sl: Sublayer, x: Tensor, ctx: Context, combine: Combine | None = None) -> Tensor:
        f = self.branch(sl, ctx)
        if combine is not None:
            return combine(sl, x, f, ctx.t)
        return sublayer_apply(self.cfg.strategy, sl.side, x, f, ctx.t, sl.ln, self.cfg.ln_eps)

    def make_context(self, src, tgt, t: int = 0, train_mode: bool = False,
                     rng: np.random.Generator | None = None) -> Context:
        src, tgt = self._check_ids(src), self._check_ids(tgt)
        self_mask = causal_mask(tgt.shape[1])[None, None] | padding_mask(tgt, PAD)
        return Context(t=t, src_mask=padding_mask(src, PAD), self_mask=self_mask,
                       train_mode=train_mode, rng=rng, dropout=self.cfg.dropout, ffn_hidden=[])

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.dtype.kind not in "iu":
            raise InputError("token ids must be an integer array of shape (batch, length)")
        if ids.shape[1] > self.cfg.max_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InputError(f"token id out of range [0, {self.cfg.vocab_size})")
        return ids

    def forward(self, src, tgt, t: int = 0, train_mode: bool = False, rng: np.random.Generator | None = None,
                combine: Combine | None = None, retain: bool = False) -> ForwardOutput:
        """Run encoder and decoder; ``logits`` has shape ``(batch, tgt_len, vocab)``.

        ``retain`` keeps gradients on every sublayer input/output after backward.
        ``combine`` replaces the strategy's combination rule (used by diagnostics).
        """
        src, tgt = self._check_ids(src), self._check_ids(tgt)
        if train_mode and self.cfg.dropout > 0 and rng is None:
            raise ConfigError("train_mode with dropout needs an rng")
        ctx = self.make_context(src, tgt, t, train_mode, rng)
        preln = self.cfg.strategy.kind == "preln"

        x = self._embed("src_embed", src, ctx)
        enc_states = [x]
        for sl in self.encoder_sublayers:
            x = self.apply_sublayer(sl, x, ctx, combine)
            enc_states.append(x)
        ctx.memory = layer_norm(x, self.final_ln["encoder"], self.cfg.ln_eps) if preln else x

        y = self._embed("tgt_embed", tgt, ctx)
        dec_states = [y]
        for sl in self.decoder_sublayers:
            y = self.apply_sublayer(sl, y, ctx, combine)
            dec_states.append(y)
        out = layer_norm(y, self.final_ln["decoder"], self.cfg.ln_eps) if preln else y

        if retain:
            for s in enc_states + dec_states:
                s.retain_grad()
        return ForwardOutput(self.project(out), enc_states, dec_states, ctx.memory, ctx.ffn_hidden, ctx)

    def project(self, h: Tensor) -> Tensor:
        if self.cfg.tie_output:
            return T.matmul(h, T.transpose(self.params["tgt_embed"]))
        return T.matmul(h, self.params["out_proj"])

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def build_model(cfg: ModelConfig) -> Model:
    """Deterministically initialize a model from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    d, V = cfg.d_model, cfg.vocab_size
    params: dict[str, Tensor] = {}

    def embedding(name):
        w = rng.normal(0.0, d ** -0.5, size=(V, d))
        w[PAD] = 0.0
        params[name] = Tensor(w, requires_grad=True, name=name)

    embedding("src_embed")
    if cfg.share_embeddings:
        params["tgt_embed"] = params["src_embed"]
    else:
        embedding("tgt_embed")

    layout = [("encoder", i, k) for i in range(cfg.N) for k in ("self_attn", "ffn")]
    layout += [("decoder", i, k) for i in range(cfg.M) for k in ("self_attn", "cross_attn", "ffn")]
    sublayers = []
    for idx, (side, layer, kind) in enumerate(layout):
        gain = cfg.strategy.init_gain(side)
        prefix = f"{'enc' if side == 'encoder' else 'dec'}.{layer}.{kind}"
        if kind == "ffn":
            p = init_feed_forward(d, cfg.d_ffn, rng, gain, prefix)
        else:
            p = init_attention(d, cfg.heads, rng, gain, prefix)
        ln = LayerNormParams.create(d, f"{prefix}.ln")
        for name, tns in list(p.tensors().items()) + [("ln.gain", ln.gain), ("ln.bias", ln.bias)]:
            params[f"{prefix}.{name}"] = tns
        sublayers.append(Sublayer(idx, side, kind, layer, p, ln))

    final_ln = {}
    if cfg.strategy.kind == "preln":
        for side, tag in (("encoder", "enc"), ("decoder", "dec")):
            final_ln[side] = LayerNormParams.create(d, f"{tag}.final_ln")
            params[f"{tag}.final_ln.gain"] = final_ln[side].gain
            params[f"{tag}.final_ln.bias"] = final_ln[side].bias
    if not cfg.tie_output:
        params["out_proj"] = Tensor(xavier_init((d, V), 1.0, rng), requires_grad=True, name="out_proj")

    if len(sublayers) != cfg.num_sublayers:
        raise AssertionError("sublayer count must equal 2N + 3M")
    return Model(cfg, params, sublayers, final_ln)


def unique_parameters(model: Model) -> dict[str, Tensor]:
    """Name -> tensor with shared tensors listed once (first name wins)."""
    seen, out = set(), {}
    for name, p in model.params.items():
        if id(p) not in seen:
            seen.add(id(p))
            out[name] = p
    return out


def loss(logits: Tensor, targets, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross entropy averaged over non-pad target positions."""
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise InputError(f"target id out of range [0, {logits.shape[-1]})")
    return T.cross_entropy(logits, targets, smoothing, ignore_index=PAD)


def token_nll(logits: Tensor | np.ndarray, targets) -> float:
    """Mean unsmoothed negative log-likelihood over non-pad targets."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    targets = np.asarray(targets).reshape(-1)
    z = z.reshape(-1, z.shape[-1])
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    keep = targets != PAD
    return float(-logp[np.arange(targets.size), targets][keep].mean())
