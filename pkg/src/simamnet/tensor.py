"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array and are treated as immutable: every op returns a
new tensor. When any input requires a gradient, the op records a node holding
its inputs and a backward rule; :func:`backward` walks those nodes once in
reverse topological order and then releases them.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "TensorError", "tensor", "tensor_new", "ew", "add", "sub", "mul",
    "div", "scale", "relu", "sigmoid", "matmul", "reduce", "reshape",
    "backward", "grad_check", "no_grad", "finite_checks", "make_op",
]


class TensorError(ValueError):
    """Raised on shape, domain or graph misuse."""


_GRAD_ENABLED = True
_CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-op NaN/Inf guard (the training loop checks the loss instead)."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A real n-d array with an optional gradient.

    ``data`` holds the values in row-major order with the tensor's shape; the
    flat view is available as :attr:`values`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_consumed")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise TensorError(f"non-finite value produced by {what}")


def tensor_new(shape: Sequence[int], values, requires_grad: bool = False,
               dtype=np.float64) -> Tensor:
    """Build a tensor from an extent list and flat row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise TensorError(f"every extent must be >= 1, got {list(shape)}")
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    if arr.size != math.prod(shape):
        raise TensorError(
            f"length mismatch: {arr.size} values for shape {list(shape)} "
            f"({math.prod(shape)} elements)")
    _check_finite(arr, "tensor_new")
    return Tensor(arr.reshape(shape).copy(), requires_grad=requires_grad)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor from a nested sequence or array, keeping its shape."""
    arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return tensor_new(arr.shape, arr, requires_grad, dtype=arr.dtype)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap ``data`` as an op output and record a node when needed.

    ``backward_fn`` maps the output gradient to a sequence of input gradients
    (``None`` where an input needs none).
    """
    if _CHECK_FINITE:
        _check_finite(data, op)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        out._node = _Node(op, tuple(inputs), backward_fn)
        return out
    return Tensor(data)


def _as_operand(b, like: Tensor):
    if isinstance(b, Tensor):
        return b
    if isinstance(b, (int, float, np.floating, np.integer)):
        return float(b)
    raise TensorError(f"unsupported operand type {type(b).__name__}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # equal shapes, size-1 operands, or kept-dim (extent 1) statistics only
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.data.ndim == b.data.ndim and all(
            x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)):
        return
    raise TensorError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a: Tensor, b, fwd, da, db) -> Tensor:
    b = _as_operand(b, a)
    if not isinstance(b, Tensor):
        if op == "div" and b == 0.0:
            raise TensorError("division by zero scalar")
        out = fwd(a.data, b)
        return make_op(op, out, (a,), lambda g: (da(g, a.data, b, out),))
    _check_broadcast(a, b, op)
    out = fwd(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(da(g, a.data, b.data, out), a.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g, a.data, b.data, out), b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(op, out, (a, b), bw)


def add(a: Tensor, b) -> Tensor:
    return _binary("add", a, b, np.add,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary("sub", a, b, np.subtract,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor) and not np.all(b.data != 0):
        raise TensorError("div: zero in denominator")
    return _binary("div", a, b, np.divide,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_op("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return make_op("relu", out, (a,), lambda g: (g * (a.data > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_EW = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}


def ew(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, div, scale, relu, sigmoid)."""
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    if op not in _EW:
        raise TensorError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TensorError(f"{op} needs a second operand")
    return _EW[op](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TensorError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: inner extents differ, {list(a.shape)} x {list(b.shape)}")
    out = a.data @ b.data

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return make_op("matmul", out, (a, b), bw)


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise TensorError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise TensorError(f"repeated axis in {axes}")
    return tuple(sorted(norm))


def reduce(op: str, t: Tensor, axes=None) -> Tensor:
    """Reduce over ``axes`` (all when None); reduced axes are kept as extent 1."""
    axes = _norm_axes(axes, t.data.ndim)
    m = math.prod(t.shape[a] for a in axes)
    x = t.data
    if op == "sum":
        out = x.sum(axis=axes, keepdims=True)
        return make_op("sum", out, (t,), lambda g: (np.broadcast_to(g, x.shape),))
    if op == "mean":
        out = x.sum(axis=axes, keepdims=True) / m
        return make_op("mean", out, (t,), lambda g: (np.broadcast_to(g / m, x.shape),))
    if op in ("var_pop", "var_sample"):
        div_ = m if op == "var_pop" else m - 1
        if div_ < 1:
            raise TensorError(f"{op} needs more than one element along the reduced axes")
        centered = x - x.sum(axis=axes, keepdims=True) / m
        out = (centered * centered).sum(axis=axes, keepdims=True) / div_
        return make_op(op, out, (t,), lambda g: (g * (2.0 / div_) * centered,))
    raise TensorError(f"unknown reduction {op!r}")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != t.size or any(s < 1 for s in shape):
        raise TensorError(f"cannot reshape {list(t.shape)} to {list(shape)}")
    src = t.shape
    return make_op("reshape", t.data.reshape(shape), (t,), lambda g: (g.reshape(src),))


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._node is not None:
            for inp in node._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable leaf that requires a gradient.

    Leaf gradients are overwritten, not accumulated across calls. The graph is
    released afterwards, so a second call needs a fresh forward pass.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if loss._consumed:
        raise TensorError("backward already ran on this graph; run a new forward pass")
    if not loss.requires_grad:
        raise TensorError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = np.array(g, dtype=t.dtype).reshape(t.shape)
            continue
        in_grads = t._node.backward(g)
        for inp, gi in zip(t._node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi
    for t in order:
        t._node = None
    loss._consumed = True


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Compare autodiff gradients of ``f`` with central finite differences.

    Non-scalar outputs are contracted with a fixed random weighting so every
    output element contributes. ``max_coords`` samples that many coordinates
    per input (all by default). Returns the largest
    ``|a - n| / max(1, |a|, |n|)`` over the checked coordinates.
    """
    if eps <= 0:
        raise TensorError("eps must be positive")
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.array(t.data, dtype=t.dtype), requires_grad=True) for t in inputs]
    out = f(*leaves)
    weights = rng.standard_normal(out.shape) if out.size > 1 else None

    def scalarize(o: Tensor) -> Tensor:
        if weights is None:
            return o if o.data.ndim == 1 else reshape(o, (1,))
        return reduce("sum", mul(o, Tensor(weights.astype(o.dtype))))

    backward(scalarize(out))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]

    def probe() -> float:
        with no_grad():
            return float(scalarize(f(*leaves)).data.sum())

    base = probe()
    if probe() != base:
        raise TensorError("grad_check: f is not deterministic across probe evaluations")
    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        idx: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = probe()
            flat[i] = orig - eps
            fm = probe()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
