"""Reverse-mode automatic differentiation on dense numpy arrays.

Every backward rule is written in terms of the same differentiable ops, so
a gradient computed with ``create_graph=True`` is itself a graph node and can
be differentiated again.  This is what lets a matching loss be differentiated
through a window of unrolled SGD steps with respect to the inputs that shaped
those steps (images, learning rate, per-parameter weights).

Numerics run in one global dtype: float64 for tests and oracles, float32 for
speed runs (see :func:`set_default_dtype`).
"""

from __future__ import annotations

import contextlib
import warnings

import numpy as np

from .errors import GradCheckError, GraphError, ShapeError

_DTYPE = np.dtype(np.float64)
_RECORDING = True


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Select the working precision for all newly created tensors."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DTYPE = dt


@contextlib.contextmanager
def using_dtype(dtype):
    global _DTYPE
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def _paused_recording():
    """Run ops without recording graph nodes (used for create_graph=False)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    """Dense real tensor, optionally tracked in a computation graph.

    A tensor created with ``requires_grad=True`` is a differentiation leaf;
    tensors produced by ops on tracked tensors carry references to their
    parents and a backward rule.  The graph is acyclic and freed as soon as
    the last reference to its outputs is dropped.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # Arithmetic sugar; python scalars become constant tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward) -> Tensor:
    out = Tensor(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitive ops


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to the original operand shape."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tensor_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tensor_sum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, (a.shape, b.shape)) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _node(a.data * b.data, "mul", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (neg(g),)

    return _node(-a.data, "neg", (a,), backward)


def scale(a, c: float) -> Tensor:
    """Multiply a tensor by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (scale(g, c),)

    return _node(a.data * a.data.dtype.type(c), "scale", (a,), backward)


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        return (mul(g, scale(pow_const(a, p - 1.0), p)),)

    return _node(a.data ** a.data.dtype.type(p), "pow", (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        # Rebuilt as an op (not a cached constant) so grad-of-grad sees it.
        return (mul(g, exp(a)),)

    return _node(np.exp(a.data), "exp", (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (mul(g, pow_const(a, -1.0)),)

    return _node(np.log(a.data), "log", (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(a.data.dtype)

    def backward(g):
        return (mul(g, Tensor(mask)),)

    return _node(np.maximum(a.data, 0), "relu", (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", (a.shape, b.shape), "expects (m,k) @ (k,n)")

    def backward(g):
        return matmul(g, transpose2d(b)), matmul(transpose2d(a), g)

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (permute(g, inverse),)

    return _node(np.transpose(a.data, axes), "permute", (a,), backward)


def transpose2d(a) -> Tensor:
    return permute(a, (1, 0))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", (a.shape,), f"cannot reshape to {tuple(shape)}") from None

    def backward(g):
        return (reshape(g, orig),)

    return _node(data, "reshape", (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", (a.shape,), f"target {shape}") from None

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _node(data, "broadcast_to", (a,), backward)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes or None, keepdims=keepdims)
    kshape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        gk = g if keepdims or not a.ndim else reshape(g, kshape)
        return (broadcast_to(gk, a.shape),)

    return _node(data, "sum", (a,), backward)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise ShapeError("mean", (a.shape,), "reduction over zero elements")
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    parents = tuple(as_tensor(t) for t in tensors)
    if not parents:
        raise ShapeError("concat", (), "needs at least one tensor")
    try:
        data = np.concatenate([p.data for p in parents], axis=axis)
    except ValueError:
        raise ShapeError("concat", tuple(p.shape for p in parents)) from None
    # Flat positions of each input inside the concatenated output.
    pos = np.arange(data.size, dtype=np.int64).reshape(data.shape)
    sizes = np.cumsum([p.shape[axis] for p in parents])[:-1]
    part_idx = [part.ravel() for part in np.split(pos, sizes, axis=axis)]

    def backward(g):
        return tuple(take_flat(g, idx, p.shape) for idx, p in zip(part_idx, parents))

    return _node(data, "concat", parents, backward)


def take_flat(a, idx, out_shape) -> Tensor:
    """Gather ``a.ravel()[idx]`` into ``out_shape``; linear, hence C-infinity."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    out_shape = tuple(out_shape)
    n = 1
    for s in out_shape:
        n *= s
    if idx.size != n:
        raise ShapeError("take_flat", (a.shape,), f"{idx.size} indices for shape {out_shape}")
    size = a.size

    def backward(g):
        return (reshape(put_flat(g, idx, size), a.shape),)

    return _node(a.data.ravel()[idx].reshape(out_shape), "take_flat", (a,), backward)


def put_flat(v, idx, size: int) -> Tensor:
    """Scatter-add ``v`` into a zero vector of length ``size`` (dual of take_flat)."""
    v = as_tensor(v)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size != v.size:
        raise ShapeError("put_flat", (v.shape,), f"{idx.size} indices for {v.size} values")
    out = np.zeros(size, dtype=v.data.dtype)
    np.add.at(out, idx, v.data.ravel())

    def backward(g):
        return (take_flat(g, idx, v.shape),)

    return _node(out, "put_flat", (v,), backward)


def take_rows(a, rows) -> Tensor:
    """Gather rows along the leading axis (differentiable index_select)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    rowsize = int(np.prod(a.shape[1:], dtype=np.int64)) if a.ndim > 1 else 1
    flat = (rows[:, None] * rowsize + np.arange(rowsize, dtype=np.int64)[None, :]).ravel()
    return take_flat(a, flat, (rows.size,) + a.shape[1:])


def squared_l2_norm(a) -> Tensor:
    a = as_tensor(a)
    return tensor_sum(mul(a, a))


def softmax_cross_entropy_with_onehot(logits, onehot) -> Tensor:
    """Mean cross-entropy between softmax(logits) and one-hot targets.

    Stabilized with a detached per-row max; exact for any constant shift.
    """
    logits, onehot = as_tensor(logits), as_tensor(onehot)
    if logits.ndim != 2 or logits.shape != onehot.shape:
        raise ShapeError("softmax_cross_entropy_with_onehot", (logits.shape, onehot.shape))
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, m)
    lse = log(tensor_sum(exp(z), axis=1, keepdims=True))
    picked = tensor_sum(mul(z, onehot), axis=1, keepdims=True)
    return tensor_mean(sub(lse, picked))


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(loss: Tensor):
    """Post-order over the tracked subgraph: inputs before consumers."""
    order = []
    visited = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def grad(loss, wrt, create_graph: bool = False):
    """Gradients of a scalar loss with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are themselves graph
    nodes, so they can be fed back into further ops and differentiated again.
    A wrt tensor not reachable from the loss yields zeros plus a
    RuntimeWarning rather than an error.
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise GraphError(f"grad: loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    wrt_ids = {id(w) for w in wrt}

    grads: dict[int, Tensor] = {}
    if loss.requires_grad:
        order = _topo_order(loss)
        # A node matters only if some wrt tensor sits below it.
        reach: dict[int, bool] = {}
        for node in order:
            reach[id(node)] = id(node) in wrt_ids or any(
                reach.get(id(p), False) for p in node._parents if p.requires_grad
            )
        grads[id(loss)] = Tensor(np.ones_like(loss.data))
        ctx = contextlib.nullcontext() if create_graph else _paused_recording()
        with ctx:
            for node in reversed(order):
                if node._backward is None or not reach.get(id(node), False):
                    continue
                g = grads.get(id(node))
                if g is None:
                    continue
                for p, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not p.requires_grad or not reach.get(id(p), False):
                        continue
                    acc = grads.get(id(p))
                    grads[id(p)] = pg if acc is None else add(acc, pg)

    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            warnings.warn(
                f"grad: tensor of shape {w.shape} unreachable from loss; returning zeros",
                RuntimeWarning,
                stacklevel=2,
            )
            g = Tensor(np.zeros_like(w.data))
        out.append(g)
    return out


def grad_check(f, point, step: float = 1e-5) -> float:
    """Worst relative error between analytic gradient and central differences.

    ``f`` maps tensors to a scalar tensor; ``point`` is a list of arrays.
    The error denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    Intended for float64 mode.
    """
    base = [np.asarray(p, dtype=_DTYPE) for p in point]
    leaves = [Tensor(p, requires_grad=True) for p in base]
    analytic = [g.data.copy() for g in grad(f(*leaves), leaves)]

    def evaluate(arrays):
        with _paused_recording():
            value = f(*[Tensor(arr) for arr in arrays])
        return float(value.data.reshape(()))

    worst = 0.0
    for i, arr in enumerate(base):
        flat = arr.ravel()
        a_flat = analytic[i].ravel()
        for k in range(flat.size):
            numeric_pair = []
            for sign in (1.0, -1.0):
                bumped = arr.copy()
                bumped.ravel()[k] = flat[k] + sign * step
                val = evaluate(base[:i] + [bumped] + base[i + 1 :])
                if not np.isfinite(val):
                    raise GradCheckError(
                        f"non-finite value {val} at input {i}, coordinate {k}"
                    )
                numeric_pair.append(val)
            numeric = (numeric_pair[0] - numeric_pair[1]) / (2.0 * step)
            denom = max(abs(a_flat[k]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[k] - numeric) / denom)
    return worst
