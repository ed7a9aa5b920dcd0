"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  :func:`backward` walks
the graph in reverse topological order and accumulates gradients on leaf
tensors created with ``requires_grad=True``.

The op set is closed and small: it covers the transformer encoder, the
projectors, the decoder and the losses used by the rest of the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _all_finite(arr: np.ndarray) -> bool:
    # a finite sum proves every entry finite; only a non-finite sum needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return True
    return bool(np.all(np.isfinite(arr)))


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray.  ``grad`` is allocated lazily, only
    for tensors that require gradients, and has the same shape as ``data``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        # leaves own a private copy; op outputs are already fresh arrays
        arr = np.array(data, dtype=np.float64) if _op == "leaf" else np.asarray(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError(f"non-finite values in {_op} output")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the functions below
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _readonly_view(view: np.ndarray) -> np.ndarray:
    # reshape/permute share memory with their input instead of copying;
    # locking the view keeps callers from mutating the input through it
    view.flags.writeable = False
    return view


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents, _op=op)
    if out.requires_grad:
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
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
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast (e.g. a bias row)."""
    _broadcast_shape(a, b, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data + b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "subtract")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data - b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(data, (a, b), "subtract", grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "multiply")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "multiply", grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data * c
    return _make(data, (a,), "scale", lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = a.data * a.data
    return _make(data, (a,), "square", lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of a negative value")
    data = np.sqrt(a.data)

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(data > 0, g / (2.0 * np.where(data > 0, data, 1.0)), 0.0)
        return (out,)

    return _make(data, (a,), "sqrt", grad_fn)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), "relu", lambda g: (g * (a.data > 0),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _stable_sigmoid(a.data)
    return _make(data, (a,), "sigmoid", lambda g: (g * data * (1.0 - data),))


# ---------------------------------------------------------------------------
# reductions and normalisation along the last axis
# ---------------------------------------------------------------------------

def _check_last_axis(a: Tensor, op: str) -> None:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"{op}: empty last axis")


def softmax(a: Tensor) -> Tensor:
    _check_last_axis(a, "softmax")
    data = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (data * (g - (g * data).sum(axis=-1, keepdims=True)),)

    return _make(data, (a,), "softmax", grad_fn)


def log_softmax(a: Tensor) -> Tensor:
    _check_last_axis(a, "log_softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def grad_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(data, (a,), "log_softmax", grad_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all entries (``axis=None``) or over one axis."""
    if axis is None:
        n = a.data.size
        if n == 0:
            raise ShapeError("mean of an empty tensor")
        data = np.asarray(a.data.mean())

        def grad_fn(g):
            return (np.full(a.shape, float(g) / n),)

    else:
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"mean: axis {axis} out of range for shape {a.shape}")
        n = a.shape[axis]
        if n == 0:
            raise ShapeError("mean over an empty axis")
        data = a.data.mean(axis=axis)

        def grad_fn(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _make(data, (a,), "mean", grad_fn)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        data = np.asarray(a.data.sum())

        def grad_fn(g):
            return (np.full(a.shape, float(g)),)

    else:
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
        data = a.data.sum(axis=axis)

        def grad_fn(g):
            return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(data, (a,), "sum", grad_fn)


def layer_norm(a: Tensor, gain: Tensor, offset: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``* gain + offset``."""
    _check_last_axis(a, "layer_norm")
    n = a.shape[-1]
    if gain.shape != (n,) or offset.shape != (n,):
        raise ShapeError(f"layer_norm: gain/offset must have shape ({n},), got {gain.shape}, {offset.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xhat = a.data - mu
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    data = xhat * gain.data
    data += offset.data

    def grad_fn(g):
        lead = tuple(range(a.ndim - 1))
        dxhat = g * gain.data
        proj = np.einsum("...i,...i->...", dxhat, xhat)[..., None]
        # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        dx = dxhat - dxhat.mean(axis=-1, keepdims=True)
        dx -= xhat * (proj / n)
        dx *= inv_std
        dgain = np.einsum("ij,ij->j", g.reshape(-1, n), xhat.reshape(-1, n))
        return (dx, dgain, g.sum(axis=lead))

    return _make(data, (a, gain, offset), "layer_norm", grad_fn)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    flat = b.ndim == 2 and a.ndim > 2
    with np.errstate(over="ignore", invalid="ignore"):
        if flat:
            # weight shared across leading axes: one 2-D GEMM is much faster
            data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            data = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _make(data, (a, b), "matmul", grad_fn)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for a 2-D weight shared across all leading axes of ``x``.

    Same values as ``add(matmul(x, w), b)`` in one graph node, which saves a
    full pass over the (often large) output in both directions.
    """
    if x.ndim < 1 or w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: need x (..., k), w (k, n), b (n,); got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: inner dimensions differ, {x.shape} @ {w.shape}")
    k, n = w.shape
    flat = x.data.reshape(-1, k)
    with np.errstate(over="ignore", invalid="ignore"):
        data = flat @ w.data
        data += b.data
    data = data.reshape(x.shape[:-1] + (n,))

    def grad_fn(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    return _make(data, (x, w, b), "affine", grad_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (plain transpose for 2-D input)."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
    data = np.swapaxes(a.data, -1, -2).copy()
    return _make(data, (a,), "transpose", lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Reorder all axes, like ``np.transpose(a, axes)``."""
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of the axes of {a.shape}")
    data = _readonly_view(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))
    return _make(data, (a,), "permute", lambda g: (np.transpose(g, inverse),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ShapeError("concat of nothing")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.ndim == 0 or p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ, {[q.shape for q in parts]}")
    data = np.concatenate([p.data for p in parts], axis=-1)
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def grad_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(data, tuple(parts), "concat", grad_fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if a.ndim == 0 or not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] invalid for shape {a.shape}")
    data = a.data[..., start:stop].copy()

    def grad_fn(g):
        out = np.zeros(a.shape)
        out[..., start:stop] = g
        return (out,)

    return _make(data, (a,), "slice", grad_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[start:stop]`` along the first axis."""
    if a.ndim == 0 or not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"row slice [{start}:{stop}] invalid for shape {a.shape}")
    data = a.data[start:stop].copy()

    def grad_fn(g):
        out = np.zeros(a.shape)
        out[start:stop] = g
        return (out,)

    return _make(data, (a,), "slice_rows", grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    data = _readonly_view(a.data.reshape(shape))
    return _make(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# dispatch by name
# ---------------------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "affine": affine,
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "scale": scale,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "mean": mean,
    "sum": sum,
    "square": square,
    "sqrt": sqrt,
    "concat": lambda *parts: concat(parts),
    "slice": slice_last,
    "slice_rows": slice_rows,
    "transpose": transpose,
    "permute": permute,
    "layer_norm": layer_norm,
    "relu": relu,
    "reshape": reshape,
}


def apply(kind: str, *operands, **kwargs) -> Tensor:
    """Apply the op named ``kind``; non-Tensor arguments are passed through."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# backpropagation
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping from each such leaf to its accumulated gradient.
    Intermediate nodes do not keep gradients.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    errors: dict[str, float]
    epsilon: float
    tolerance: float
    max_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_error = max(self.errors.values(), default=0.0)
        self.passed = self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))


def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {f"p{i}": p for i, p in enumerate(params)}


def numerical_gradient(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                       eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every entry of every parameter."""
    out = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().data
            flat[i] = orig - eps
            f_minus = loss_fn().data
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss when perturbing {name}[{i}]")
            g.reshape(-1)[i] = (float(f_plus) - float(f_minus)) / (2.0 * eps)
        out[name] = g
    return out


def analytic_gradient(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    out = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()}
    for p in params.values():
        p.zero_grad()
    return out


def compare_gradients(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                      eps: float, tolerance: float) -> GradReport:
    errors = {name: float(relative_error(analytic[name], numeric[name]).max(initial=0.0)) for name in numeric}
    return GradReport(errors=errors, epsilon=eps, tolerance=tolerance)


def grad_check(loss_fn: Callable[..., Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
               eps: float = 1e-5, tolerance: float = 1e-4) -> GradReport:
    """Compare backprop gradients of a scalar loss against central differences.

    ``loss_fn`` takes no arguments and must close over ``params`` (whose
    ``data`` arrays are perturbed in place and restored).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = _as_named(params)
    analytic = analytic_gradient(loss_fn, named)
    numeric = numerical_gradient(loss_fn, named, eps)
    return compare_gradients(analytic, numeric, eps, tolerance)
