"""Named parameter storage and the transformer building blocks shared by encoders and decoders."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParameterStore:
    """Ordered name -> tensor map; every learnable array of a model lives here.

    Entries registered with ``trainable=False`` are persisted in checkpoints but
    never handed to the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._fixed: set[str] = set()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=trainable)
        self._params[name] = t
        if not trainable:
            self._fixed.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return name not in self._fixed and self._params[name].requires_grad

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if self.is_trainable(n)}

    def freeze(self, prefix: str) -> None:
        for n in self.names(prefix):
            self._params[n].requires_grad = False

    def unfreeze(self, prefix: str) -> None:
        for n in self.names(prefix):
            if n not in self._fixed:
                self._params[n].requires_grad = True

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items() if n.startswith(prefix)}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into existing entries (dtype of the store is kept)."""
        for name, arr in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            dst = self._params[name]
            if dst.data.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {dst.data.shape}")
            dst.data[...] = arr

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)


class Init:
    """Seeded initialisers: uniform(-1/sqrt(h), 1/sqrt(h)) for matrices."""

    def __init__(self, rng: np.random.Generator, h: int):
        self.rng = rng
        self.bound = 1.0 / math.sqrt(h)

    def matrix(self, *shape) -> np.ndarray:
        return self.rng.uniform(-self.bound, self.bound, size=shape).astype(np.float32)

    def vector(self, n: int, scale: float = 0.1) -> np.ndarray:
        return (self.rng.standard_normal(n) * scale).astype(np.float32)

    @staticmethod
    def zeros(*shape) -> np.ndarray:
        return np.zeros(shape, dtype=np.float32)

    @staticmethod
    def ones(*shape) -> np.ndarray:
        return np.ones(shape, dtype=np.float32)


class Linear:
    def __init__(self, store: ParameterStore, name: str, init: Init, n_in: int, n_out: int,
                 bias: bool = True):
        self.w = store.add(f"{name}.w", init.matrix(n_in, n_out))
        self.b = store.add(f"{name}.b", init.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else T.reshape(x, (-1, x.shape[-1]))
        out = T.matmul(flat, self.w)
        if self.b is not None:
            out = T.add_rowvec(out, self.b)
        if x.ndim != 2:
            out = T.reshape(out, lead + (out.shape[-1],))
        return out


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, h: int):
        self.g = store.add(f"{name}.g", Init.ones(h))
        self.b = store.add(f"{name}.b", Init.zeros(h))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(n, h) -> (heads, n, h/heads)."""
    n, h = x.shape
    return T.transpose(T.reshape(x, (n, heads, h // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(heads, n, d) -> (n, heads*d)."""
    heads, n, d = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, heads * d))


class MultiHeadAttention:
    """Scaled dot-product attention with separate query/key/value/output maps."""

    def __init__(self, store: ParameterStore, name: str, init: Init, h: int, heads: int):
        self.heads = heads
        self.scale = 1.0 / math.sqrt(h // heads)
        self.q = Linear(store, f"{name}.q", init, h, h)
        self.k = Linear(store, f"{name}.k", init, h, h)
        self.v = Linear(store, f"{name}.v", init, h, h)
        self.o = Linear(store, f"{name}.o", init, h, h)

    def __call__(self, x: Tensor, mem: Tensor, mask: np.ndarray | None = None):
        """Attend from the rows of ``x`` (n×h) over ``mem`` (m×h).

        Returns the projected output (n×h) and the weights (heads×n×m).
        """
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(mem), self.heads)
        v = split_heads(self.v(mem), self.heads)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), self.scale)
        if mask is not None:
            mask = np.broadcast_to(mask, scores.shape)
        att = T.softmax(scores, axis=-1, mask=mask)
        return self.o(merge_heads(T.matmul(att, v))), att


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, init: Init, h: int, width: int):
        self.l1 = Linear(store, f"{name}.l1", init, h, width)
        self.l2 = Linear(store, f"{name}.l2", init, width, h)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(T.relu(self.l1(x)))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
