"""Transformer decoder with cross-attention over V and over the fused memory r,
finished by a pointer-softmax switch between generating and copying."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, N_SPECIAL
from .nn import (FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParameterStore,
                 causal_mask)
from .tensor import ShapeMismatch, Tensor
from .thinkers import EmptyPrefix

MemoryFn = Callable[[Tensor], Tensor]


class LengthMismatch(ValueError):
    pass


@dataclass
class DecoderOutput:
    """Teacher-forced distributions for every prefix position (row t predicts token t+1)."""

    p_vocab: Tensor   # T×|V|
    p_copy: Tensor    # T×L, head-averaged r-attention of the last layer
    switch: Tensor    # T×1
    p_final: Tensor   # T×|V|
    gate_states: Tensor  # T×h, decoder states handed to the gate


@dataclass
class StepDistribution:
    p_vocab: np.ndarray
    p_copy: np.ndarray
    switch: float
    p_final: np.ndarray


class _StepwiseAttention:
    """Attention where query row t has its own memory r[t] (h×L)."""

    def __init__(self, store, name, init, h, heads):
        self.heads = heads
        self.d = h // heads
        self.q = Linear(store, f"{name}.q", init, h, h)
        self.k = Linear(store, f"{name}.k", init, h, h)
        self.v = Linear(store, f"{name}.v", init, h, h)
        self.o = Linear(store, f"{name}.o", init, h, h)

    def __call__(self, x: Tensor, r: Tensor):
        n, h = x.shape
        L = r.shape[2]
        H, d = self.heads, self.d
        mem = T.transpose(r, (0, 2, 1))                                     # n, L, h
        q = T.reshape(self.q(x), (n, H, 1, d))
        k = T.transpose(T.reshape(self.k(mem), (n, L, H, d)), (0, 2, 3, 1))  # n, H, d, L
        v = T.transpose(T.reshape(self.v(mem), (n, L, H, d)), (0, 2, 1, 3))  # n, H, L, d
        att = T.softmax(T.scale(T.matmul(q, k), 1.0 / math.sqrt(d)), axis=-1)  # n, H, 1, L
        out = T.reshape(T.matmul(att, v), (n, h))
        return self.o(out), T.reshape(att, (n, H, L))


class _Block:
    def __init__(self, store, name, init, h, heads, ff):
        self.self_attn = MultiHeadAttention(store, f"{name}.self", init, h, heads)
        self.ln1 = LayerNorm(store, f"{name}.ln1", h)
        self.v_attn = MultiHeadAttention(store, f"{name}.cross_v", init, h, heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", h)
        self.r_attn = _StepwiseAttention(store, f"{name}.cross_r", init, h, heads)
        self.ln3 = LayerNorm(store, f"{name}.ln3", h)
        self.ff = FeedForward(store, f"{name}.ff", init, h, ff)
        self.ln4 = LayerNorm(store, f"{name}.ln4", h)


class SoftDecoder:
    def __init__(self, store: ParameterStore, prefix: str, init: Init, vocab_size: int,
                 h: int, heads: int, layers: int, ff_mult: int, max_len: int,
                 dropout: float = 0.0):
        self.h = h
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.dropout = dropout
        self.emb = store.add(f"{prefix}.emb", init.matrix(vocab_size, h))
        self.pos = store.add(f"{prefix}.pos", init.matrix(max_len, h))
        self.blocks = [_Block(store, f"{prefix}.layer{i}", init, h, heads, ff_mult * h)
                       for i in range(layers)]
        self.out = Linear(store, f"{prefix}.vocab", init, h, vocab_size)
        self.switch = Linear(store, f"{prefix}.switch", init, 2 * h, 1)

    def copy_matrix(self, source_ids: Sequence[int]) -> np.ndarray:
        """L×|V| one-hot map from source positions to ids; special tokens map nowhere."""
        src = np.asarray(source_ids, dtype=np.int64)
        S = np.zeros((len(src), self.vocab_size), dtype=T.get_dtype())
        keep = src >= N_SPECIAL
        S[np.nonzero(keep)[0], src[keep]] = 1.0
        return S

    def forward(self, prefix_ids: Sequence[int], V: Tensor, memory_fn: MemoryFn,
                source_ids: Sequence[int], rng=None, switch_override: float | None = None) -> DecoderOutput:
        """Run the stack over a whole prefix at once (causal), as in teacher forcing.

        ``memory_fn`` maps the gate states (T×h: the first block's outputs after
        masked self-attention) to the stepwise fused memory r of shape (T, h, L).
        """
        n = len(prefix_ids)
        if n < 1:
            raise EmptyPrefix("decoder needs at least the [BOS] token")
        if n > self.max_len:
            raise ShapeMismatch(f"prefix of {n} tokens exceeds max_len={self.max_len}")
        if V.ndim != 2 or V.shape[1] != self.h:
            raise ShapeMismatch(f"V must be M×{self.h}, got {V.shape}")
        p = self.dropout
        mask = causal_mask(n)
        x = T.add(T.take_rows(self.emb, prefix_ids), T.index(self.pos, slice(0, n)))
        x = T.dropout(x, p, rng)
        gate_states = r = None
        att = ctx = None
        for i, blk in enumerate(self.blocks):
            a, _ = blk.self_attn(x, x, mask=mask)
            x = blk.ln1(x + T.dropout(a, p, rng))
            if i == 0:
                gate_states = x
                r = memory_fn(x)
                if r.ndim != 3 or r.shape[0] != n or r.shape[1] != self.h:
                    raise ShapeMismatch(f"memory must be ({n}, {self.h}, L), got {r.shape}")
                if r.shape[2] != len(source_ids):
                    raise ShapeMismatch(f"memory has {r.shape[2]} positions, source {len(source_ids)}")
            a, _ = blk.v_attn(x, V)
            x = blk.ln2(x + T.dropout(a, p, rng))
            ctx, att = blk.r_attn(x, r)
            x = blk.ln3(x + T.dropout(ctx, p, rng))
            x = blk.ln4(x + T.dropout(blk.ff(x), p, rng))

        p_vocab = T.softmax(self.out(x), axis=-1)
        heads = att.shape[1]
        p_copy = T.scale(T.sum(att, axis=1), 1.0 / heads)                    # n, L
        if switch_override is None:
            switch = T.sigmoid(self.switch(T.concat([x, ctx], axis=1)))      # n, 1
        else:
            switch = T.Tensor(np.full((n, 1), switch_override))
        copy_mass = T.matmul(p_copy, T.Tensor(self.copy_matrix(source_ids)))  # n, |V|
        total = T.matmul(copy_mass, T.ones((self.vocab_size, 1)))             # n, 1
        ones_row = T.ones((1, self.vocab_size))
        copy_dist = T.mul(copy_mass, T.matmul(T.reciprocal(total), ones_row))
        sw = T.matmul(switch, ones_row)
        p_final = T.add(T.mul(sw, p_vocab),
                        T.mul(T.sub(T.ones(sw.shape), sw), copy_dist))
        return DecoderOutput(p_vocab, p_copy, switch, p_final, gate_states)

    def decode_step(self, prefix_ids, V, memory_fn, source_ids, switch_override=None) -> StepDistribution:
        """Distribution over the next token given the prefix (which starts with [BOS])."""
        if len(prefix_ids) < 1 or prefix_ids[0] != BOS:
            raise EmptyPrefix("prefix must start with [BOS]")
        out = self.forward(prefix_ids, V, memory_fn, source_ids, switch_override=switch_override)
        return StepDistribution(out.p_vocab.data[-1].copy(), out.p_copy.data[-1].copy(),
                                float(out.switch.data[-1, 0]), out.p_final.data[-1].copy())


def nll_loss(p_final: Tensor, targets: Sequence[int], mask: Sequence[bool] | None = None) -> Tensor:
    """Mean of -log p(target) over unmasked rows, with p clamped at 1e-9."""
    targets = np.asarray(targets, dtype=np.int64)
    n = p_final.shape[0]
    if targets.shape != (n,):
        raise LengthMismatch(f"{n} distributions for {targets.shape[0]} targets")
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != (n,):
        raise LengthMismatch("mask length differs from targets")
    rows = np.nonzero(keep)[0]
    picked = T.index(p_final, (rows, targets[rows]))
    nll = T.neg(T.log(T.clamp_min(picked, 1e-9)))
    return T.scale(T.sum(nll), 1.0 / max(len(rows), 1))


# ---------------------------------------------------------------------------
# inference


StepFn = Callable[[list], np.ndarray]


def greedy(step: StepFn, max_len: int) -> list[int]:
    """Argmax decoding (ties to the lowest id) from [BOS] until [EOS] or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prefix = [BOS]
    out: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(step(prefix)))
        out.append(tok)
        if tok == EOS:
            break
        prefix.append(tok)
    return out


def beam_search(step: StepFn, max_len: int, k: int) -> list[int]:
    """Beam search keeping ``k`` hypotheses ranked by mean token log-probability."""
    if max_len < 1 or k < 1:
        raise ValueError("max_len and k must be >= 1")
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        cands = []
        for toks, logp in beams:
            probs = step([BOS] + toks)
            lp = np.log(np.maximum(probs, 1e-12))
            # stable sort keeps lower ids first among equal scores
            for w in np.argsort(-lp, kind="stable")[:k]:
                cands.append((toks + [int(w)], logp + float(lp[w])))
        cands.sort(key=lambda c: -c[1] / len(c[0]))
        beams = []
        for cand in cands:
            (finished if cand[0][-1] == EOS else beams).append(cand)
            if len(beams) == k:
                break
        if len(finished) >= k or not beams:
            break
    pool = finished if finished else beams
    best = max(pool, key=lambda c: c[1] / len(c[0]))
    return best[0]
