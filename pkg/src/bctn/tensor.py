"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the graph
rooted at a scalar loss in reverse topological order.

Shape rules are strict: binary elementwise ops need identical shapes. The only
ways to broadcast are the explicit ``repeat_columns``, ``expand`` and
``add_rowvec`` ops.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeMismatch", "EmptyInput", "NotScalar", "DetachedGraph",
    "tensor", "zeros", "ones", "no_grad", "is_grad_enabled", "precision",
    "get_dtype", "add", "sub", "mul", "neg", "scale", "matmul", "relu",
    "sigmoid", "exp", "log", "reciprocal", "clamp_min", "softmax", "sum", "mean", "concat",
    "transpose", "reshape", "expand", "repeat_columns", "max_pool_rows",
    "max_along", "take_rows", "add_rowvec", "layer_norm", "dropout",
    "backward", "grad_check", "GradCheckResult", "record_kinks",
]


class ShapeMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DetachedGraph(RuntimeError):
    pass


_GRAD_ENABLED = True
_DTYPE = np.float32
_KINKS: list | None = None
_COUNTER = itertools.count()


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern (ReLU signs, argmax choices, clamps) of a forward pass."""
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_g", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._g = None
        self._seq = next(_COUNTER)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._g = None
    out._seq = next(_COUNTER)
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward_fn
                break
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _KINKS is not None:
        _KINKS.append(np.packbits(mask).tobytes())
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def reciprocal(a: Tensor) -> Tensor:
    inv = 1.0 / a.data
    return _make(inv, (a,), lambda g: (-g * inv * inv,), "reciprocal")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    if _KINKS is not None:
        _KINKS.append(np.packbits(keep).tobytes())
    out = np.where(keep, a.data, a.data.dtype.type(lo))
    return _make(out, (a,), lambda g: (g * keep,), "clamp_min")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; rank-3/4 operands multiply batch-wise with equal batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or ad.ndim != bd.ndim:
        raise ShapeMismatch(f"matmul: ranks {ad.ndim} and {bd.ndim} unsupported")
    if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {ad.shape} and {bd.shape} incompatible")

    def bw(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.data.shape
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax. ``mask`` (bool, same shape) marks allowed entries."""
    d = x.data
    if d.size == 0 or d.shape[axis] == 0:
        raise EmptyInput("softmax of an empty tensor")
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    z = d - np.max(d, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def max_along(x: Tensor, axis: int) -> Tensor:
    """Maximum over one axis; the gradient goes to the first maximal entry."""
    d = x.data
    if d.shape[axis] == 0:
        raise EmptyInput("max over an empty axis")
    idx = np.argmax(d, axis=axis)
    if _KINKS is not None:
        _KINKS.append(idx.tobytes())
    out = np.take_along_axis(d, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(d)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), bw, "max")


def max_pool_rows(x: Tensor) -> Tensor:
    """Per-column maximum over the rows of an M×h matrix."""
    if x.ndim != 2:
        raise ShapeMismatch(f"max_pool_rows expects a matrix, got {x.shape}")
    return max_along(x, 0)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise EmptyInput("concat of no tensors")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(parts), bw, "concat")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {exc}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast size-1 axes of ``x`` to ``shape`` (ranks must match)."""
    shape = tuple(shape)
    old = x.data.shape
    if len(old) != len(shape) or any(o != 1 and o != s for o, s in zip(old, shape)):
        raise ShapeMismatch(f"expand: cannot expand {old} to {shape}")
    axes = tuple(i for i, (o, s) in enumerate(zip(old, shape)) if o == 1 and s != 1)

    def bw(g):
        return (np.sum(g, axis=axes, keepdims=True) if axes else g,)

    return _make(np.broadcast_to(x.data, shape), (x,), bw, "expand")


def repeat_columns(v: Tensor, length: int) -> Tensor:
    """Turn an h-vector into an h×L matrix whose columns all equal ``v``."""
    if v.ndim != 1:
        raise ShapeMismatch(f"repeat_columns expects a vector, got {v.shape}")
    if length < 1:
        raise ShapeMismatch("repeat_columns needs L >= 1")
    return expand(reshape(v, (v.shape[0], 1)), (v.shape[0], length))


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector along the last axis of ``x``."""
    if b.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(f"add_rowvec: {x.shape} and {b.shape}")
    red = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, np.sum(g, axis=red)), "add_rowvec")


def index(x: Tensor, idx) -> Tensor:
    shape = x.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(x.data[idx]), (x,), bw, "index")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.data.shape
    if ids.size and (ids.min() < 0 or ids.max() >= shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {shape[0]} rows")

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), bw, "take_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the learned gain and shift."""
    d = x.data
    n = d.shape[-1]
    xc = d - d.sum(axis=-1, keepdims=True) / n
    var = (xc * xc).sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    red = tuple(range(d.ndim - 1))

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.sum(axis=-1, keepdims=True) / n
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return dx, np.sum(g * xhat, axis=red), np.sum(g, axis=red)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# backward pass


def _reachable(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, latest-created first.

    Parents are always created before their children, so descending creation
    order is a reverse topological order.
    """
    seen = {id(root)}
    nodes = [root]
    stack = [root]
    while stack:
        for p in stack.pop()._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=_seq_key, reverse=True)
    return nodes


def _seq_key(t: Tensor) -> int:
    return t._seq


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; the graph is released afterwards.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedGraph("loss does not depend on any tensor that requires grad")
    order = _reachable(loss)
    loss._g = np.full(loss.data.shape, seed, dtype=loss.data.dtype)
    for node in order:
        g = node._g
        if g is None:
            continue
        node._g = None
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._g is None:
                p._g = pg
            else:
                p._g = p._g + pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped_kink: int
    n_skipped_small: int
    worst: tuple | None = None
    errors: dict = field(default_factory=dict)

    @property
    def n_skipped(self) -> int:
        return self.n_skipped_kink + self.n_skipped_small


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-3,
    coords: dict | None = None,
) -> GradCheckResult:
    """Compare backprop gradients of ``f`` with central differences.

    ``params`` maps names to leaf tensors that ``f`` reads. ``coords`` may map a
    name to an iterable of flat indices to check; by default every coordinate is
    checked. A coordinate is skipped when both gradients are below 1e-8, or when
    the ±eps perturbation changes the branch pattern of any ReLU, max or clamp
    (the finite difference straddles a kink).
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for k, p in params.items()}

    with no_grad(), record_kinks() as base_pattern:
        f()
    base_pattern = list(base_pattern)

    def evaluate():
        with no_grad(), record_kinks() as pattern:
            val = float(f().data)
        return val, pattern

    result = GradCheckResult(0.0, 0, 0, 0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs: Iterable[int] = coords.get(name, range(flat.size)) if coords else range(flat.size)
        worst_here = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp, pat_p = evaluate()
            flat[i] = orig - eps
            fm, pat_m = evaluate()
            flat[i] = orig
            if pat_p != base_pattern or pat_m != base_pattern:
                result.n_skipped_kink += 1
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            if abs(ana) < 1e-8 and abs(num) < 1e-8:
                result.n_skipped_small += 1
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            result.n_checked += 1
            worst_here = max(worst_here, err)
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, int(i), ana, num)
        result.errors[name] = worst_here
    return result
