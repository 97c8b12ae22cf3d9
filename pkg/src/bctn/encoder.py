"""Trainable transformer encoder standing in for a pretrained one.

The same stack encodes the pair input ``[CLS] first [SEP] passage [SEP]``
(followed by an output projection, giving the memory U) and the pure input
``[CLS] first [SEP]`` (giving V and its first row, the probe vector).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CLS, SEP
from .nn import FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParameterStore
from .tensor import Tensor

SIDES = ("backward", "forward")


class TooLong(ValueError):
    pass


class UnknownSide(ValueError):
    pass


@dataclass
class EncoderOutput:
    U: Tensor          # h×L, one column per pair-input token
    V: Tensor          # (K+2)×h, pure-side encoding
    V_tilde: Tensor    # h, row 0 of V
    u_cls: Tensor      # h, column 0 of U; exposed but not consumed downstream
    L: int
    source_ids: np.ndarray  # the L pair-input token ids


class _Layer:
    def __init__(self, store, name, init, h, heads, ff):
        self.attn = MultiHeadAttention(store, f"{name}.attn", init, h, heads)
        self.ln1 = LayerNorm(store, f"{name}.ln1", h)
        self.ff = FeedForward(store, f"{name}.ff", init, h, ff)
        self.ln2 = LayerNorm(store, f"{name}.ln2", h)

    def __call__(self, x, rng, p):
        a, _ = self.attn(x, x)
        x = self.ln1(x + T.dropout(a, p, rng))
        return self.ln2(x + T.dropout(self.ff(x), p, rng))


class Encoder:
    def __init__(self, store: ParameterStore, prefix: str, init: Init, vocab_size: int,
                 h: int, heads: int, layers: int, ff_mult: int, max_len: int,
                 dropout: float = 0.0, side: str = "backward"):
        if side not in SIDES:
            raise UnknownSide(side)
        self.side = side
        self.h = h
        self.max_len = max_len
        self.dropout = dropout
        self.emb = store.add(f"{prefix}.emb", init.matrix(vocab_size, h))
        self.pos = store.add(f"{prefix}.pos", init.matrix(max_len, h))
        self.layers = [_Layer(store, f"{prefix}.layer{i}", init, h, heads, ff_mult * h)
                       for i in range(layers)]
        self.proj = Linear(store, f"{prefix}.linear1", init, h, h)

    def _stack(self, ids: Sequence[int], rng) -> Tensor:
        n = len(ids)
        x = T.add(T.take_rows(self.emb, ids), T.index(self.pos, slice(0, n)))
        x = T.dropout(x, self.dropout, rng)
        for layer in self.layers:
            x = layer(x, rng, self.dropout)
        return x

    def encode_pair(self, first: Sequence[int], passage: Sequence[int], rng=None) -> tuple[Tensor, np.ndarray]:
        """Memory U (h×L, L = |first| + |passage| + 3) and the pair-input ids."""
        if len(first) < 1 or len(passage) < 1:
            raise ValueError("encode_pair needs non-empty first and passage sequences")
        if len(first) + len(passage) > self.max_len - 3:
            raise TooLong(f"{len(first)} + {len(passage)} tokens exceed max_len - 3 = {self.max_len - 3}")
        ids = np.array([CLS, *first, SEP, *passage, SEP], dtype=np.int64)
        rows = self.proj(self._stack(ids, rng))
        return T.transpose(rows), ids

    def encode_single(self, first: Sequence[int], rng=None) -> tuple[Tensor, Tensor]:
        """(V, V_tilde) for ``[CLS] first [SEP]``; no output projection."""
        if len(first) < 1:
            raise ValueError("encode_single needs a non-empty sequence")
        if len(first) > self.max_len - 2:
            raise TooLong(f"{len(first)} tokens exceed max_len - 2 = {self.max_len - 2}")
        V = self._stack([CLS, *first, SEP], rng)
        return V, T.index(V, 0)

    def encode(self, first: Sequence[int], passage: Sequence[int], rng=None) -> EncoderOutput:
        U, ids = self.encode_pair(first, passage, rng)
        V, v_tilde = self.encode_single(first, rng)
        return EncoderOutput(U, V, v_tilde, T.index(U, (slice(None), 0)), U.shape[1], ids)
