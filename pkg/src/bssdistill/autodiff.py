"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Each primitive computes its forward value eagerly and records a closure that
maps the output gradient to gradients of its parents. :func:`backward` walks
the recorded graph in reverse topological order.

Inputs are ordinary differentiable leaves, so the same machinery yields
gradients with respect to model parameters (training) and model inputs
(attacks)::

    x = Tensor(batch, requires_grad=True)
    loss = sum_(relu(affine(x, W, b)))
    grads = backward(loss, [x, W])
    grads[x].shape == batch.shape
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf."""


class GraphError(RuntimeError):
    """Invalid backward request (non-scalar output, leaf not in the trace)."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_grad_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf", parents=(), grad_fn=None, _checked=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked:
            _check_finite(arr, op)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = parents
        self._grad_fn = grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, _checked=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op, _checked=True)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), grad_fn=grad_fn, _checked=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


# --------------------------------------------------------------------------
# reductions and reshaping
# --------------------------------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), "sum", (a,), grad_fn)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(np.asarray(out), "mean", (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def take_rows(a, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"take_rows: need 2-D input and one index per row, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])

    def grad_fn(g):
        out = np.zeros(a.shape)
        out[rows, index] = g
        return (out,)

    return _node(a.data[rows, index], "take_rows", (a,), grad_fn)


# --------------------------------------------------------------------------
# linear maps
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` laid out as (out_features, in_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is None:
        return _node(out, "affine", (x, w), lambda g: (g @ w.data, g.T @ x.data))
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
    return _node(out + b.data, "affine", (x, w, b), lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation, NCHW input, (F, C, kh, kw) filters."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match filters {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    out = _kernels.conv2d_forward(xp, w.data)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match filters {w.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def grad_fn(g):
        gxp = _kernels.conv2d_backward_input(g, w.data, xp.shape[2], xp.shape[3])
        gx = gxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]] if padding else gxp
        gw = _kernels.conv2d_backward_weight(xp, g, kh, kw)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, "conv2d", parents, grad_fn)


def max_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"max_pool2d: cannot pool {x.shape} with window {k}")
    out, idx = _kernels.maxpool2d_forward(x.data, k)
    return _node(out, "max_pool2d", (x,), lambda g: (_kernels.maxpool2d_backward(g, idx, k, x.shape[2], x.shape[3]),))


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"avg_pool2d: cannot pool {x.shape} with window {k}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    out = x.data[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def grad_fn(g):
        gx = np.zeros(x.shape)
        gx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _node(out, "avg_pool2d", (x,), grad_fn)


# --------------------------------------------------------------------------
# softmax family
# --------------------------------------------------------------------------


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = softmax_np(a.data, axis)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = log_softmax_np(a.data, axis)
    p = np.exp(out)
    return _node(out, "log_softmax", (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


class GradientMap(dict):
    """Leaf tensor -> gradient array, keyed by tensor identity."""


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(output: Tensor, wrt: Iterable[Tensor]) -> GradientMap:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``."""
    wrt = list(wrt)
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    order = _toposort(output) if output.requires_grad else [output]
    in_trace = {id(n) for n in order}
    for leaf in wrt:
        if id(leaf) not in in_trace:
            raise GraphError(f"requested leaf {leaf!r} is not part of the traced graph")

    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    out = GradientMap()
    for leaf in wrt:
        out[leaf] = grads.get(id(leaf), np.zeros(leaf.shape)).reshape(leaf.shape)
    return out


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    leaf: np.ndarray,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare :func:`backward` against central differences of ``fn`` at ``leaf``.

    ``fn`` maps a tensor to a scalar tensor and is re-run for every
    perturbation, so it must be deterministic.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaf = np.array(leaf, dtype=np.float64)
    t = Tensor(leaf, requires_grad=True)
    out = fn(t)
    # an output that never touched the leaf has an identically zero gradient
    analytic = backward(out, [t])[t] if out.requires_grad else np.zeros(leaf.shape)
    numeric = numerical_gradient(lambda v: fn(Tensor(v)).item(), leaf, step)
    err = float(relative_error(analytic, numeric).max()) if leaf.size else 0.0
    return GradCheckReport(err <= tolerance, err, analytic, numeric)
