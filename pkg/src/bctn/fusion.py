"""Gated fusion of the inertial and reverse memories into the decoder memory r."""

from __future__ import annotations

from . import tensor as T
from .nn import Init, ParameterStore
from .tensor import ShapeMismatch, Tensor


class Fusion:
    """r_l = k_l·a_l + (1 - k_l)·b_l with a = alpha·x, b = beta·y and
    k_l = sigmoid(W_f·[a; b; a∘b; a-b] + bias), one scalar gate per column.

    alpha and beta are fixed mixing weights, never learned.
    """

    def __init__(self, store: ParameterStore, prefix: str, init: Init, h: int,
                 alpha: float = 0.8, beta: float = 0.2):
        if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        self.h = h
        self.alpha = alpha
        self.beta = beta
        self.W_f = store.add(f"{prefix}.W_f", init.matrix(4 * h, 1))
        self.bias = store.add(f"{prefix}.bias", init.zeros(1))

    def __call__(self, x: Tensor, y: Tensor | None) -> tuple[Tensor, Tensor]:
        return self.fuse(x, y)

    def fuse(self, x: Tensor, y: Tensor | None) -> tuple[Tensor, Tensor]:
        """Fuse inertial-side ``x`` with reverse-side ``y``.

        Either operand may be h×L or stepwise (T, h, L); an h×L operand is
        shared across steps. ``y=None`` means the reverse side is absent
        (fed as zeros). Returns (r, k) with k of shape (T, L) or (L,).
        """
        h = self.h
        stepwise = x.ndim == 3 or (y is not None and y.ndim == 3)
        x3 = x if x.ndim == 3 else T.reshape(x, (1,) + x.shape)
        if y is None:
            y3 = T.zeros(x3.shape)
        else:
            y3 = y if y.ndim == 3 else T.reshape(y, (1,) + y.shape)
        n = max(x3.shape[0], y3.shape[0])
        if x3.shape[1] != h or x3.shape[1:] != y3.shape[1:]:
            raise ShapeMismatch(f"fuse: {x.shape} vs {None if y is None else y.shape}")
        L = x3.shape[2]
        if x3.shape[0] != n:
            x3 = T.expand(x3, (n, h, L))
        if y3.shape[0] != n:
            y3 = T.expand(y3, (n, h, L))
        a = T.scale(x3, self.alpha)
        b = T.scale(y3, self.beta)
        feats = T.concat([a, b, T.mul(a, b), T.sub(a, b)], axis=1)           # n, 4h, L
        rows = T.reshape(T.transpose(feats, (0, 2, 1)), (n * L, 4 * h))
        logits = T.add_rowvec(T.matmul(rows, self.W_f), self.bias)           # n*L, 1
        k = T.sigmoid(T.reshape(logits, (n, 1, L)))
        k3 = T.expand(k, (n, h, L))
        r = T.add(T.mul(k3, a), T.mul(T.sub(T.ones(k3.shape), k3), b))
        k = T.reshape(k, (n, L))
        if not stepwise:
            return T.reshape(r, (h, L)), T.reshape(k, (L,))
        return r, k
