"""Multi-step reasoning over an encoded memory, plus the decode-time gate.

Memories are h×L with one column per input token. The reasoning module runs
J start/end blocks probed by the pure-side vector; the gated variant then
scales each column of its output by a sigmoid gate computed from the memory
column and a context vector pooled from attention over the decoded prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Init, ParameterStore, split_heads
from .tensor import ShapeMismatch, Tensor


class StepsExhausted(RuntimeError):
    pass


class EmptyPrefix(ValueError):
    pass


@dataclass
class ReasoningState:
    j: int
    s: Tensor
    e: Tensor
    gamma: Tensor | None = None
    eta: Tensor | None = None
    O: Tensor | None = None
    Z: Tensor | None = None


@dataclass
class GateContext:
    alpha: Tensor    # (T, heads, M_v, T); step t attends over prefix rows 0..t
    v_new: Tensor    # (T, M_v, h)
    c: Tensor        # (T, h)
    g: Tensor | None = None  # (T, L), filled by apply_gate


@dataclass
class ReasonTrace:
    states: list = field(default_factory=list)


def _probe(v_tilde: Tensor, M: Tensor) -> Tensor:
    """softmax(v_tilde^T M) over the L columns of ``M``."""
    h, L = M.shape
    logits = T.reshape(T.matmul(T.reshape(v_tilde, (1, h)), M), (L,))
    return T.softmax(logits)


def _pool(M: Tensor, p: Tensor) -> Tensor:
    """Columns of ``M`` weighted by the distribution ``p``."""
    return T.reshape(T.matmul(M, T.reshape(p, (p.shape[0], 1))), (M.shape[0],))


class Thinker:
    """Reasoning parameters; ``gated=True`` adds the gate controller."""

    def __init__(self, store: ParameterStore, prefix: str, init: Init, h: int, J: int = 2,
                 gated: bool = True, gate_heads: int = 4):
        self.h = h
        self.J = J
        self.gated = gated
        self.W_s = store.add(f"{prefix}.W_s", init.matrix(h, 2 * h))
        self.W_e = store.add(f"{prefix}.W_e", init.matrix(h, 3 * h))
        self.W_a = store.add(f"{prefix}.W_a", init.matrix(h, 3 * h))
        self.s0 = store.add(f"{prefix}.s0", init.vector(h))
        self.e0 = store.add(f"{prefix}.e0", init.vector(h))
        if gated:
            if h % gate_heads:
                raise ValueError(f"h={h} not divisible by gate_heads={gate_heads}")
            self.gate_heads = gate_heads
            self.W_g = store.add(f"{prefix}.W_g", init.matrix(h))
            self.W_g2 = store.add(f"{prefix}.W_g2", init.matrix(h))
            self.att_q = store.add(f"{prefix}.gate_att.q", init.matrix(h, h))
            self.att_k = store.add(f"{prefix}.gate_att.k", init.matrix(h, h))

    # -- reasoning -------------------------------------------------------

    def initial_state(self) -> ReasoningState:
        return ReasoningState(0, self.s0, self.e0)

    def reasoning_block(self, U: Tensor, v_tilde: Tensor, state: ReasoningState) -> ReasoningState:
        if state.j >= self.J:
            raise StepsExhausted(f"reasoning step {state.j} >= J={self.J}")
        h, L = U.shape
        if h != self.h or v_tilde.shape != (h,):
            raise ShapeMismatch(f"reasoning_block: U {U.shape}, V_tilde {v_tilde.shape}, h={self.h}")
        S = T.repeat_columns(state.s, L)
        O = T.relu(T.matmul(self.W_s, T.concat([S, U], axis=0)))
        gamma = _probe(v_tilde, O)
        s_next = _pool(O, gamma)
        Z = T.relu(T.matmul(self.W_e, T.concat(
            [T.repeat_columns(s_next, L), T.repeat_columns(state.e, L), U], axis=0)))
        eta = _probe(v_tilde, Z)
        e_next = _pool(Z, eta)
        return ReasoningState(state.j + 1, s_next, e_next, gamma, eta, O, Z)

    def reason(self, U: Tensor, v_tilde: Tensor, J: int | None = None,
               trace: ReasonTrace | None = None) -> Tensor:
        """Run J reasoning blocks, then project every memory column with the final vectors."""
        J = self.J if J is None else J
        if J < 1:
            raise ValueError("J must be >= 1")
        if J > self.J:
            raise StepsExhausted(f"J={J} exceeds configured {self.J}")
        state = self.initial_state()
        for _ in range(J):
            state = self.reasoning_block(U, v_tilde, state)
            if trace is not None:
                trace.states.append(state)
        L = U.shape[1]
        stacked = T.concat([T.repeat_columns(state.s, L), T.repeat_columns(state.e, L), U], axis=0)
        return T.relu(T.matmul(self.W_a, stacked))

    # -- gate ------------------------------------------------------------

    def gate_context(self, V: Tensor, Y: Tensor) -> GateContext:
        """Attention from the pure-side rows of ``V`` over decoder states ``Y``.

        Row t of the result uses the prefix Y[0..t]; values are the decoder
        states themselves, split across heads. ``c`` max-pools the M_v
        attended vectors of each step.
        """
        if not self.gated:
            raise RuntimeError("inertial thinker has no gate")
        if Y.ndim != 2 or Y.shape[0] < 1:
            raise EmptyPrefix("gate_context needs at least one decoder state")
        n_steps, h = Y.shape
        m_v = V.shape[0]
        H = self.gate_heads
        d = h // H
        q = split_heads(T.matmul(V, self.att_q), H)                 # H, M_v, d
        k = split_heads(T.matmul(Y, self.att_k), H)                 # H, T, d
        vals = split_heads(Y, H)                                    # H, T, d
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))  # H, M_v, T
        scores = T.expand(T.reshape(scores, (1, H, m_v, n_steps)), (n_steps, H, m_v, n_steps))
        steps = np.arange(n_steps)
        mask = np.broadcast_to((steps[None, :] <= steps[:, None])[:, None, None, :],
                               (n_steps, H, m_v, n_steps))
        alpha = T.softmax(scores, axis=-1, mask=mask)               # T, H, M_v, T
        per_head = T.reshape(T.transpose(alpha, (1, 0, 2, 3)), (H, n_steps * m_v, n_steps))
        mixed = T.matmul(per_head, vals)                            # H, T*M_v, d
        v_new = T.reshape(T.transpose(T.reshape(mixed, (H, n_steps, m_v, d)), (1, 2, 0, 3)),
                          (n_steps, m_v, h))
        c = T.max_along(v_new, 1)
        return GateContext(alpha, v_new, c)

    def apply_gate(self, U: Tensor, u_tilde: Tensor, c: Tensor, enabled: bool = True):
        """Scale column l of ``u_tilde`` by sigmoid(W_g·u_l + W_g'·c_t).

        ``c`` is (T, h) giving a (T, h, L) result, or a single (h,) context
        giving (h, L). With ``enabled=False`` the gate is identically 1.
        Returns (u_new, g).
        """
        h, L = U.shape
        if u_tilde.shape != (h, L):
            raise ShapeMismatch(f"apply_gate: U {U.shape} vs u_tilde {u_tilde.shape}")
        single = c.ndim == 1
        if single:
            c = T.reshape(c, (1, h))
        if c.shape[1] != h:
            raise ShapeMismatch(f"apply_gate: context {c.shape} for h={h}")
        n = c.shape[0]
        if not enabled:
            g = T.ones((n, L))
            u_new = T.expand(T.reshape(u_tilde, (1, h, L)), (n, h, L))
        else:
            col = T.matmul(T.reshape(self.W_g, (1, h)), U)          # 1, L
            ctx = T.matmul(c, T.reshape(self.W_g2, (h, 1)))         # n, 1
            logits = T.add(T.matmul(ctx, T.ones((1, L))), T.matmul(T.ones((n, 1)), col))
            g = T.sigmoid(logits)                                   # n, L
            g3 = T.expand(T.reshape(g, (n, 1, L)), (n, h, L))
            u_new = T.mul(g3, T.expand(T.reshape(u_tilde, (1, h, L)), (n, h, L)))
        if single:
            return T.reshape(u_new, (h, L)), T.reshape(g, (L,))
        return u_new, g

    def reverse_think(self, v_tilde: Tensor, V: Tensor, memory: Tensor, Y: Tensor,
                      u_tilde: Tensor | None = None, gate_enabled: bool = True):
        """reason -> gate_context -> apply_gate on ``memory`` (U, or the inertial output).

        ``u_tilde`` may carry a cached reasoning output, since it does not depend
        on the decoded prefix. Returns (u_new (T,h,L), GateContext).
        """
        if u_tilde is None:
            u_tilde = self.reason(memory, v_tilde)
        ctx = self.gate_context(V, Y)
        u_new, g = self.apply_gate(memory, u_tilde, ctx.c, enabled=gate_enabled)
        ctx.g = g
        return u_new, ctx


def inertial_think(thinker: Thinker, U: Tensor, v_tilde: Tensor) -> Tensor:
    """Ungated multi-step reasoning with the forward-stage parameters."""
    return thinker.reason(U, v_tilde)
