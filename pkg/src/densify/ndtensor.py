"""Small reverse-mode autodiff engine over float64 numpy arrays.

Backward rules are written in terms of Tensor operations, so when ``grad`` is
called with ``keep_graph=True`` the returned gradients are themselves part of
a graph and can be differentiated again (Hessian-vector products, mixed
partials).

The graph is implicit: each non-leaf Tensor keeps references to its parents
and a closure mapping an output cotangent to parent cotangents. Graphs live as
long as the tensors that reference them, i.e. one forward pass.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, ParameterError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def recording(flag: bool):
    """Enable or disable graph construction inside the block (thread-local)."""
    prev = is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    return recording(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def param(cls, data) -> "Tensor":
        return cls(data, requires_grad=True)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- broadcasting


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape``; the adjoint of ``broadcast_to``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True).reshape(shape)
    src = x.shape
    return _make(data, (x,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.broadcast_to(x.data, shape)
    src = x.shape
    return _make(data, (x,), lambda g: (sum_to(g, src),), "broadcast_to")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), backward, "exp")
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not (0.0 <= p < 1.0):
        raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= p
    return mul(x, Tensor(keep / (1.0 - p)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast"
        ) from None

    def backward(g):
        ga = matmul(g, swap_last(b))
        gb = matmul(swap_last(a), g)
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) % x.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes), (x,), lambda g: (transpose(g, inv),), "transpose"
    )


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(data, (x,), lambda g: (reshape(g, src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along {axis}: shapes {shapes}: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            slice_axis(g, axis, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(data, tuple(tensors), backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    extent = x.shape[axis]

    def backward(g):
        pieces = []
        if start > 0:
            pieces.append(Tensor(np.zeros(_with(x.shape, axis, start))))
        pieces.append(g)
        if stop < extent:
            pieces.append(Tensor(np.zeros(_with(x.shape, axis, extent - stop))))
        return (concat(pieces, axis) if len(pieces) > 1 else g,)

    return _make(x.data[tuple(idx)], (x,), backward, "slice")


def _with(shape, axis, n):
    s = list(shape)
    s[axis] = n
    return tuple(s)


# ---------------------------------------------------------------- reductions


def _check_axis(x: Tensor, axis, op):
    if axis is None:
        if x.size == 0:
            raise DimensionError(f"{op}: empty tensor")
        return
    for ax in np.atleast_1d(axis):
        if not -x.ndim <= ax < x.ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for shape {x.shape}")
        if x.shape[ax] == 0:
            raise DimensionError(f"{op}: axis {ax} of shape {x.shape} is empty")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "sum")
    kshape = np.sum(x.data, axis=axis, keepdims=True).shape
    src = x.shape
    return _make(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (broadcast_to(reshape(g, kshape), src),),
        "sum",
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "mean")
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def max_(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximiser only."""
    x = as_tensor(x)
    _check_axis(x, axis, "max")
    idx = np.argmax(x.data, axis=axis)
    mask = np.zeros_like(x.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    mask_t = Tensor(mask)
    kshape = np.max(x.data, axis=axis, keepdims=True).shape
    src = x.shape
    return _make(
        np.max(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (mul(broadcast_to(reshape(g, kshape), src), mask_t),),
        "max",
    )


def reduce(x: Tensor, axis: int, kind: str, keepdims: bool = False) -> Tensor:
    if kind == "mean":
        return mean(x, axis, keepdims)
    if kind == "sum":
        return sum_(x, axis, keepdims)
    if kind == "max":
        return max_(x, axis, keepdims)
    raise ParameterError(f"unknown reduction {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # The shift is treated as a constant; softmax is invariant to it.
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, sum_(e, axis, keepdims=True))


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.ndim != 1 or pred.shape != target.shape or pred.shape[0] == 0:
        raise DimensionError(f"mse: pred {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))


def dot(xs: Sequence[Tensor], ys: Sequence) -> Tensor:
    """Sum of elementwise products over paired lists."""
    total = None
    for x, y in zip(xs, ys):
        term = sum_(mul(x, y))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------- differentiation


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    keep_graph: bool = False,
    allow_unused: bool = False,
) -> list:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    With ``keep_graph`` the backward pass records its own graph, so the
    results can be fed into a further ``grad`` call.
    """
    if output.size != 1:
        raise GraphError(f"grad needs a scalar output, got shape {output.shape}")
    for t in inputs:
        if not t.requires_grad:
            raise GraphError(f"input {t!r} does not require grad")
    wanted = {id(t) for t in inputs}
    grads: dict = {}
    if output.requires_grad:
        grads[id(output)] = Tensor(np.ones_like(output.data))
        with recording(keep_graph):
            for node in reversed(_toposort(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                if id(node) not in wanted:
                    del grads[id(node)]
                for p, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise GraphError(f"input {t!r} is not reachable from the output")
            g = Tensor(np.zeros_like(t.data))
        elif g.shape != t.shape:
            g = sum_to(g, t.shape) if keep_graph else Tensor(np.broadcast_to(g.data, t.shape))
        out.append(g if keep_graph else Tensor(g.data))
    return out


def flatten(tensors: Iterable) -> np.ndarray:
    parts = [np.ravel(t.data if isinstance(t, Tensor) else t) for t in tensors]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vec: np.ndarray, like: Sequence) -> list:
    shapes = [t.shape for t in like]
    total = int(sum(np.prod(s, dtype=int) for s in shapes))
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != total:
        raise DimensionError(f"flat vector of length {vec.size} for {total} parameters")
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s, dtype=int))
        out.append(vec[pos : pos + n].reshape(s))
        pos += n
    return out


def hvp_from_grads(grads: Sequence[Tensor], params: Sequence[Tensor], v) -> np.ndarray:
    """H·v given gradients built with ``keep_graph=True``."""
    parts = unflatten(v, params)
    live = [(g, Tensor(p)) for g, p in zip(grads, parts) if g.requires_grad]
    if not live:
        return np.zeros(sum(p.size for p in params))
    inner = dot([g for g, _ in live], [p for _, p in live])
    return flatten(grad(inner, params, allow_unused=True))


def hvp(loss: Tensor, params: Sequence[Tensor], v) -> np.ndarray:
    """Hessian-vector product of ``loss`` at ``params`` without forming the Hessian."""
    unflatten(v, params)
    grads = grad(loss, params, keep_graph=True)
    return hvp_from_grads(grads, params, v)
