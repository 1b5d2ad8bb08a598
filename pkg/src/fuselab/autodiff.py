"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every primitive computes its value on
construction and remembers how to recompute it, so a finished graph can be
re-evaluated in place (``forward``) after leaf data changes. ``backward``
walks the graph once in reverse topological order and accumulates
gradients on every node that requires them.

Primitive set: matmul, add/sub/mul (broadcasting), relu, sigmoid,
layernorm, concat on the last axis, slicing, sum, mean, square,
moving average, transpose, reshape. Everything else is composed.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "NonFiniteError",
    "set_check_finite",
    "add",
    "sub",
    "mul",
    "div",
    "broadcast_add",
    "matmul",
    "relu",
    "sigmoid",
    "square",
    "layernorm",
    "concat_last",
    "take",
    "transpose",
    "reshape",
    "sum_",
    "mean",
    "moving_average",
    "mse_loss",
    "forward",
    "backward",
    "check_gradients",
]


class ShapeMismatchError(ValueError):
    """Raised when a primitive receives shapes it cannot combine."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf value is produced and checking is enabled."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced non-finite values")


# When True, every primitive validates its output for NaN/Inf. Leaf
# construction always validates regardless of this flag.
_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Tensor:
    """A float64 array that doubles as a node in the autodiff graph.

    Leaves are created directly from data; interior nodes are created by
    the primitives below and carry the op tag, parent references, a
    re-evaluation closure and a backward closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_fwd", "_bwd")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple = (),
        _fwd: Optional[Callable] = None,
        _bwd: Optional[Callable] = None,
    ):
        arr = _as_array(data)
        if op == "leaf" and not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf")
        if _CHECK_FINITE and op != "leaf" and not np.all(np.isfinite(arr)):
            raise NonFiniteError(op)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.parents = parents
        self._fwd = _fwd
        self._bwd = _bwd

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def set_data(self, data) -> None:
        """Replace leaf data in place (shape must not change)."""
        arr = _as_array(data)
        if arr.shape != self.data.shape:
            raise ShapeMismatchError("set_data", self.data.shape, arr.shape)
        self.data = arr

    def backward(self) -> None:
        backward(self)

    # operator sugar on tensors only; scalars are wrapped explicitly by callers
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def _node(op, out, parents, fwd, bwd) -> Tensor:
    return Tensor(out, op=op, parents=tuple(parents), _fwd=fwd, _bwd=bwd)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)

    def bwd(g, out):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _node("add", a.data + b.data, (a, b), lambda x, y: x + y, bwd)


# Bias-style broadcast addition is plain `add` with numpy semantics; the
# alias keeps the intent explicit at call sites.
broadcast_add = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)

    def bwd(g, out):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _node("sub", a.data - b.data, (a, b), lambda x, y: x - y, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)

    def bwd(g, out):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _node("mul", a.data * b.data, (a, b), lambda x, y: x * y, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("div", a, b)

    def bwd(g, out):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g * a.data / (b.data * b.data), b.shape)

    return _node("div", a.data / b.data, (a, b), lambda x, y: x / y, bwd)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is defined as 0: mask uses a strict inequality
    def bwd(g, out):
        if x.requires_grad:
            x.grad += g * (x.data > 0.0)

    return _node("relu", np.maximum(x.data, 0.0), (x,), lambda v: np.maximum(v, 0.0), bwd)


def sigmoid(x: Tensor) -> Tensor:
    def fwd(v):
        return 1.0 / (1.0 + np.exp(-v))

    out = fwd(x.data)

    def bwd(g, o):
        if x.requires_grad:
            x.grad += g * o * (1.0 - o)

    return _node("sigmoid", out, (x,), fwd, bwd)


def square(x: Tensor) -> Tensor:
    def bwd(g, out):
        if x.requires_grad:
            x.grad += g * 2.0 * x.data

    return _node("square", x.data * x.data, (x,), lambda v: v * v, bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def bwd(g, out):
        if a.requires_grad:
            a.grad += _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _node("matmul", np.matmul(a.data, b.data), (a, b), np.matmul, bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def layernorm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis: scale * (x - mean)/sqrt(var + eps) + shift."""
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeMismatchError("layernorm", x.shape, scale.shape, shift.shape)

    def fwd(xv, sv, bv):
        mu = xv.mean(axis=-1, keepdims=True)
        var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
        return sv * (xv - mu) / np.sqrt(var + eps) + bv

    out = fwd(x.data, scale.data, shift.data)

    def bwd(g, o):
        xv = x.data
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if scale.requires_grad:
            scale.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        if shift.requires_grad:
            shift.grad += g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gx = g * scale.data
            # d/dx of (x - mu) * inv with mu, var both functions of x
            x.grad += inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )

    return _node("layernorm", out, (x, scale, shift), fwd, bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    base = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != base:
            raise ShapeMismatchError("concat_last", *(p.shape for p in parts))
    sizes = [p.shape[-1] for p in parts]

    def bwd(g, out):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.grad += g[..., offset : offset + n]
            offset += n

    return _node(
        "concat_last",
        np.concatenate([p.data for p in parts], axis=-1),
        parts,
        lambda *vs: np.concatenate(vs, axis=-1),
        bwd,
    )


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    axis = axis % x.ndim
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeMismatchError("take", x.shape, (start, stop, axis))
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(x.ndim))

    def bwd(g, out):
        if x.requires_grad:
            x.grad[idx] += g

    return _node("take", x.data[idx], (x,), lambda v: v[idx], bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatchError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g, out):
        if x.requires_grad:
            x.grad += np.transpose(g, inverse)

    return _node("transpose", np.transpose(x.data, axes), (x,), lambda v: np.transpose(v, axes), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatchError("reshape", x.shape, shape)
    old = x.shape

    def bwd(g, out):
        if x.requires_grad:
            x.grad += g.reshape(old)

    return _node("reshape", x.data.reshape(shape), (x,), lambda v: v.reshape(shape), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _reduced_gradient(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.full(shape, float(g.reshape(-1)[0]))
    kept = list(shape)
    kept[axis % len(shape)] = 1
    return np.broadcast_to(g.reshape(kept), shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def fwd(v):
        out = np.asarray(v.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
        return out.reshape(out.shape if out.ndim else (1,))

    def bwd(g, out):
        if x.requires_grad:
            x.grad += _reduced_gradient(g, x.shape, axis)

    return _node("sum", fwd(x.data), (x,), fwd, bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis % x.ndim]

    def fwd(v):
        out = np.asarray(v.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
        return out.reshape(out.shape if out.ndim else (1,))

    def bwd(g, out):
        if x.requires_grad:
            x.grad += _reduced_gradient(g, x.shape, axis) / count

    return _node("mean", fwd(x.data), (x,), fwd, bwd)


# ---------------------------------------------------------------------------
# moving average (trend extraction)
# ---------------------------------------------------------------------------


def moving_average(x: Tensor, kernel: int, axis: int = 1) -> Tensor:
    """Centered moving average with replicate padding at both ends.

    `kernel` must be odd so the window is symmetric around each step.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"moving_average: kernel must be odd and positive, got {kernel}")
    axis = axis % x.ndim
    n = x.shape[axis]
    pad = (kernel - 1) // 2
    # source index for output position t and window offset j, with replicate
    # padding folded into a clipped index map
    positions = np.arange(n)[:, None] + np.arange(kernel)[None, :] - pad
    positions = np.clip(positions, 0, n - 1)

    def fwd(v):
        moved = np.moveaxis(v, axis, 0)
        out = moved[positions].mean(axis=1)
        return np.moveaxis(out, 0, axis)

    def bwd(g, out):
        if not x.requires_grad:
            return
        gm = np.moveaxis(g, axis, 0) / kernel
        acc = np.zeros_like(np.moveaxis(x.data, axis, 0))
        for j in range(kernel):
            np.add.at(acc, positions[:, j], gm)
        x.grad += np.moveaxis(acc, 0, axis)

    return _node("moving_average", fwd(x.data), (x,), fwd, bwd)


# ---------------------------------------------------------------------------
# composed convenience
# ---------------------------------------------------------------------------


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError("mse_loss", pred.shape, target.shape)
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# graph execution
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
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
        for p in node.parents:
            stack.append((p, False))
    return order  # leaves first, root last


def forward(root: Tensor) -> np.ndarray:
    """Re-evaluate the cached graph from current leaf data; returns root value."""
    for node in _topo_order(root):
        if node._fwd is not None:
            node.data = node._fwd(*(p.data for p in node.parents))
            if _CHECK_FINITE and not np.all(np.isfinite(node.data)):
                raise NonFiniteError(node.op)
    return root.data


def backward(root: Tensor) -> None:
    """Populate `.grad` on every requires-grad node reachable from `root`.

    The root gradient is seeded with ones. Gradients in the subgraph are
    reset first, so repeated calls give identical results.
    """
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data) if node.requires_grad else None
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._bwd is not None and node.requires_grad:
            node._bwd(node.grad, node.data)


def check_gradients(root: Tensor, leaf: Tensor, step: float = 1e-5) -> float:
    """Compare analytic gradients on `leaf` against central differences.

    Returns max over leaf entries of |analytic - numeric| / max(1, |analytic|).
    The numeric derivative is of sum(root), matching the ones-seeded backward.
    """
    if step <= 0:
        raise ValueError("check_gradients: step must be positive")
    forward(root)
    backward(root)
    if leaf.grad is None:
        raise ValueError("check_gradients: leaf does not require gradients")
    analytic = leaf.grad.copy()
    flat = leaf.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = float(forward(root).sum())
        flat[i] = keep - step
        lo = float(forward(root).sum())
        flat[i] = keep
        numeric = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    forward(root)
    return worst
