"""The two-stage network: reverse-thinking (answer+passage -> question) and
inertial retraining (question+passage -> answer) on top of the frozen reverse path."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import Config
from .data import BOS, EOS, EncodedExample
from .decoder import DecoderOutput, SoftDecoder, beam_search, greedy, nll_loss
from .encoder import Encoder, EncoderOutput
from .fusion import Fusion
from .nn import Init, ParameterStore
from .tensor import Tensor
from .thinkers import ReasonTrace, Thinker

# Parameter name prefixes of the reverse stage (theta) and the inertial stage (theta').
THETA = ("bwd_encoder.", "reverse_thinker.", "fuse1.", "decoder1.", "partner")
THETA_PRIME = ("fwd_encoder.", "inertial_thinker.", "fuse2.", "decoder2.")


@dataclass
class Prepared:
    """Everything the decoder needs for one example, cached across decode steps."""

    V: Tensor
    memory_fn: Callable[[Tensor], Tensor]
    source_ids: np.ndarray
    enc: EncoderOutput
    traces: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)


class BCTN:
    def __init__(self, config: Config, vocab_size: int, stage: int = 1, seed: int | None = None):
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        self.config = config
        self.vocab_size = vocab_size
        self.stage = stage
        self.seed = config.train.seed if seed is None else seed
        self.store = ParameterStore()
        m = config.model
        self._component = 0

        def init() -> Init:
            self._component += 1
            return Init(np.random.default_rng([self.seed, self._component]), m.h)

        def encoder(prefix, side):
            return Encoder(self.store, prefix, init(), vocab_size, m.h, m.heads, m.layers,
                           m.ff_mult, m.max_len, m.dropout, side=side)

        def decoder(prefix):
            return SoftDecoder(self.store, prefix, init(), vocab_size, m.h, config.decoder.heads,
                               config.decoder.layers, m.ff_mult, m.max_len, m.dropout)

        f = config.fusion
        # reverse stage
        self.bwd_encoder = encoder("bwd_encoder", "backward")
        self.reverse = Thinker(self.store, "reverse_thinker", init(), m.h, m.J, gated=True,
                               gate_heads=m.gate_heads)
        self.fuse1 = Fusion(self.store, "fuse1", init(), m.h, f.alpha, f.beta)
        self.decoder1 = decoder("decoder1")
        partner = np.random.default_rng([self.seed, 1000]).standard_normal(m.h).astype(np.float32)
        self.partner = self.store.add("partner", partner, trainable=False)
        # inertial stage
        if stage == 2:
            self.fwd_encoder = encoder("fwd_encoder", "forward")
            self.inertial = Thinker(self.store, "inertial_thinker", init(), m.h, m.J, gated=False)
            self.fuse2 = Fusion(self.store, "fuse2", init(), m.h, f.alpha, f.beta)
            self.decoder2 = decoder("decoder2")

    # ------------------------------------------------------------------

    def encoder_for(self, side: str) -> Encoder:
        if side == "backward":
            return self.bwd_encoder
        if side == "forward" and self.stage == 2:
            return self.fwd_encoder
        from .encoder import UnknownSide
        raise UnknownSide(side)

    def theta_names(self) -> list[str]:
        return [n for n in self.store if n.startswith(THETA)]

    def theta_prime_names(self) -> list[str]:
        return [n for n in self.store if n.startswith(THETA_PRIME)]

    def freeze_theta(self) -> None:
        for p in THETA:
            self.store.freeze(p)

    @property
    def gate_enabled(self) -> bool:
        return self.config.ablate.gate_enabled

    @property
    def reverse_enabled(self) -> bool:
        return self.config.ablate.reverse_enabled

    # ------------------------------------------------------------------

    def prepare(self, stage: int, first: Sequence[int], passage: Sequence[int], rng=None) -> Prepared:
        """Encode and reason once; return a closure producing r from decoder states.

        Stage 1 takes the answer as ``first``; stage 2 takes the question.
        """
        if stage == 1:
            return self._prepare_reverse(first, passage, rng)
        if stage == 2 and self.stage == 2:
            return self._prepare_inertial(first, passage, rng)
        raise ValueError(f"model built for stage {self.stage} cannot run stage {stage}")

    def _prepare_reverse(self, first, passage, rng) -> Prepared:
        enc = self.bwd_encoder.encode(first, passage, rng)
        trace = ReasonTrace()
        u_tilde = self.reverse.reason(enc.U, enc.V_tilde, trace=trace)
        partner = T.repeat_columns(self.partner, enc.L)
        prep = Prepared(enc.V, None, enc.source_ids, enc, {"reverse": trace})

        def memory_fn(Y: Tensor) -> Tensor:
            u_new, ctx = self._gated(enc.V_tilde, enc.V, enc.U, Y, u_tilde)
            r, k = self.fuse1(partner, u_new)
            prep.probe.update(gate=ctx, fusion_k=k, u_new=u_new, r=r)
            return r

        prep.memory_fn = memory_fn
        return prep

    def _prepare_inertial(self, first, passage, rng) -> Prepared:
        enc = self.fwd_encoder.encode(first, passage, rng)
        traces = {"inertial": ReasonTrace()}
        u_in = self.inertial.reason(enc.U, enc.V_tilde, trace=traces["inertial"])
        prep = Prepared(enc.V, None, enc.source_ids, enc, traces)
        if self.reverse_enabled:
            traces["reverse"] = ReasonTrace()
            u_rev = self.reverse.reason(u_in, enc.V_tilde, trace=traces["reverse"])

            def memory_fn(Y: Tensor) -> Tensor:
                u_new, ctx = self._gated(enc.V_tilde, enc.V, u_in, Y, u_rev)
                r, k = self.fuse2(u_in, u_new)
                prep.probe.update(gate=ctx, fusion_k=k, u_new=u_new, r=r)
                return r
        else:
            def memory_fn(Y: Tensor) -> Tensor:
                h, L = u_in.shape
                r, k = self.fuse2(u_in, None)
                r = T.expand(T.reshape(r, (1, h, L)), (Y.shape[0], h, L))
                prep.probe.update(gate=None, fusion_k=k, u_new=None, r=r)
                return r

        prep.memory_fn = memory_fn
        return prep

    def _gated(self, v_tilde, V, memory, Y, u_tilde):
        if self.gate_enabled:
            return self.reverse.reverse_think(v_tilde, V, memory, Y, u_tilde=u_tilde)
        # gate ablated: g ≡ 1, no attention over the prefix is needed
        u_new, g = self.reverse.apply_gate(memory, u_tilde, T.zeros((Y.shape[0], memory.shape[0])),
                                           enabled=False)
        return u_new, None

    def decoder_for(self, stage: int) -> SoftDecoder:
        return self.decoder1 if stage == 1 else self.decoder2

    # ------------------------------------------------------------------

    @staticmethod
    def fields(stage: int, ex: EncodedExample) -> tuple[Sequence[int], Sequence[int]]:
        """(input side sequence, target sequence) for a stage."""
        return (ex.answer, ex.question) if stage == 1 else (ex.question, ex.answer)

    def teacher_forced(self, stage: int, ex: EncodedExample, rng=None,
                       prep_out: list | None = None) -> tuple[DecoderOutput, np.ndarray]:
        first, target = self.fields(stage, ex)
        prep = self.prepare(stage, first, ex.passage, rng)
        if prep_out is not None:
            prep_out.append(prep)
        prefix = [BOS, *target]
        targets = np.array([*target, EOS], dtype=np.int64)
        out = self.decoder_for(stage).forward(prefix, prep.V, prep.memory_fn, prep.source_ids, rng)
        return out, targets

    def loss(self, stage: int, ex: EncodedExample, rng=None) -> Tensor:
        out, targets = self.teacher_forced(stage, ex, rng)
        return nll_loss(out.p_final, targets)

    def generate(self, stage: int, first: Sequence[int], passage: Sequence[int],
                 max_len: int | None = None, beam: int | None = None) -> list[int]:
        """Decode from [BOS]; the returned ids exclude [BOS] and include [EOS] if produced."""
        max_len = self.config.decode.max_len if max_len is None else max_len
        beam = self.config.decode.beam if beam is None else beam
        dec = self.decoder_for(stage)
        with T.no_grad():
            prep = self.prepare(stage, first, passage)

            def step(prefix):
                out = dec.forward(prefix, prep.V, prep.memory_fn, prep.source_ids)
                return out.p_final.data[-1]

            ids = greedy(step, max_len) if beam <= 1 else beam_search(step, max_len, beam)
        return ids
