"""Synthetic seq2seq tasks (copy / reverse) with padded batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .model import BOS, EOS, N_RESERVED, PAD

TASK_KINDS = ("copy", "reverse")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 4
    max_len: int = 8

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab_size must exceed the {N_RESERVED} reserved tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")

    @property
    def seq_len(self) -> int:
        """Longest encoded sequence (content plus EOS or BOS)."""
        return self.max_len + 1


@dataclass(frozen=True)
class Batch:
    src: np.ndarray      # content + EOS, right-padded
    tgt_in: np.ndarray   # BOS + answer
    tgt_out: np.ndarray  # answer + EOS

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def num_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def make_batch(spec: TaskSpec, rng: np.random.Generator, n: int) -> Batch:
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    width = int(lengths.max()) + 1
    src = np.full((n, width), PAD, dtype=np.int64)
    tgt_in = np.full((n, width), PAD, dtype=np.int64)
    tgt_out = np.full((n, width), PAD, dtype=np.int64)
    for i, k in enumerate(lengths):
        seq = rng.integers(N_RESERVED, spec.vocab_size, size=k)
        ans = seq if spec.kind == "copy" else seq[::-1]
        src[i, :k], src[i, k] = seq, EOS
        tgt_in[i, 0], tgt_in[i, 1:k + 1] = BOS, ans
        tgt_out[i, :k], tgt_out[i, k] = ans, EOS
    return Batch(src, tgt_in, tgt_out)


def sentences_per_batch(spec: TaskSpec, batch_size_tokens: int) -> int:
    return max(1, batch_size_tokens // spec.seq_len)


def batch_stream(spec: TaskSpec, seed: int, batch_size_tokens: int) -> Iterator[Batch]:
    """Infinite deterministic batch stream for ``seed``."""
    rng = np.random.default_rng(seed)
    n = sentences_per_batch(spec, batch_size_tokens)
    while True:
        yield make_batch(spec, rng, n)
