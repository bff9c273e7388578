"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation produces a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` sorts the recorded graph topologically and walks it once in
reverse.

Storage is single precision by default; reductions accumulate in double
precision.  :func:`precision` switches the storage dtype (gradient checks run
in float64).  Any operation yielding NaN/Inf raises :class:`NumericError`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "precision",
    "no_grad",
    "default_dtype",
    "make_node",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "clamp_max",
    "sum",
    "mean",
    "reshape",
    "concat",
    "slice_axis",
    "matmul",
    "tape",
    "backward",
    "grad_check",
]

_state = {"dtype": np.float32, "grad": True}
# creation stamp; backward sums a node's incoming gradients in this order
_counter = itertools.count()


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation-only forward passes)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by '{op}'")


class Tensor:
    """Dense n-dimensional array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sum(self):
        return sum(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an operation.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent.  The node is only linked into the graph when some
    parent requires a gradient and recording is enabled.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_state["dtype"])
    out.grad = None
    out.op = op
    out._seq = next(_counter)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_node(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return make_node(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_node(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_node(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_node(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return make_node(y, (a,), lambda g: (g / x,), "log")


def clamp_max(a: Tensor, limit: float) -> Tensor:
    """min(a, limit) elementwise; gradient passes where a < limit."""
    mask = a.data < limit
    y = np.where(mask, a.data, limit).astype(a.data.dtype)
    return make_node(y, (a,), lambda g: (g * mask,), "clamp_max")


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, factor: float = 1.0) -> Tensor:
    """Dispatch one of add, sub, mul, relu, sigmoid, tanh, scale."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, factor)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    total = np.sum(a.data, dtype=np.float64).reshape(1)
    return make_node(total, (a,), lambda g: (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    """Mean over all elements (scalar result) or over the given axes."""
    shape = a.shape
    if axis is None:
        n = a.size
        m = (np.sum(a.data, dtype=np.float64) / n).reshape(1)
        return make_node(
            m, (a,), lambda g: (np.full(shape, g.reshape(-1)[0] / n, dtype=g.dtype),), "mean"
        )
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    n = int(np.prod([shape[ax] for ax in axes]))
    m = np.mean(a.data, axis=axes, dtype=np.float64)
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def _bwd(g):
        return (np.broadcast_to(g.reshape(kept) / n, shape).astype(g.dtype),)

    return make_node(m, (a,), _bwd, "mean_axes")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def _bwd(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return make_node(out, tensors, _bwd, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def _bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return make_node(a.data[idx], (a,), _bwd, "slice")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def tape(loss: Tensor) -> list[Tensor]:
    """Return the graph below ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients accumulate into existing ``.grad`` arrays.  Leaves listed in
    ``inputs`` that the loss does not depend on receive zero-filled gradients.
    Returns a map from each such leaf to its gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    result: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        # Contributions are summed in the forward creation order of the
        # consumers, so graphs that differ only by branches carrying exact
        # zeros produce bit-identical gradients.
        pending: dict[int, list[tuple[int, np.ndarray]]] = {id(loss): [(-1, np.ones_like(loss.data))]}
        for node in reversed(tape(loss)):
            parts = pending.pop(id(node), None)
            if parts is None:
                continue
            parts.sort(key=lambda item: item[0])
            g = parts[0][1]
            for _, extra in parts[1:]:
                g = g + extra
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                result[node] = node.grad
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                pending.setdefault(id(parent), []).append((node._seq, pg))
    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        result[leaf] = leaf.grad
    return result


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    dtype=np.float64,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``f`` is called with copies of ``inputs`` (cast to ``dtype``) and must
    return a scalar tensor.  Per input tensor the error is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)`` over the
    checked coordinates, so entries whose gradient is near zero do not turn
    rounding noise into large ratios.  With ``max_coords`` only a seeded
    random subset of coordinates per input is perturbed.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    rng = np.random.default_rng(seed)
    with precision(dtype):
        xs = [Tensor(np.array(x.data, dtype=dtype), requires_grad=True) for x in inputs]
        out = f(*xs)
        backward(out, xs)
        analytic = [x.grad.copy() for x in xs]
        worst = 0.0
        with no_grad():
            for x, ga in zip(xs, analytic):
                flat = x.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = rng.choice(flat.size, size=max_coords, replace=False)
                numeric = np.empty(len(coords))
                for k, i in enumerate(coords):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f(*xs).item()
                    flat[i] = orig - eps
                    fm = f(*xs).item()
                    flat[i] = orig
                    numeric[k] = (fp - fm) / (2 * eps)
                ana = ga.reshape(-1)[coords].astype(np.float64)
                scale = max(np.linalg.norm(ana), np.linalg.norm(numeric), 1e-8)
                worst = max(worst, float(np.linalg.norm(ana - numeric) / scale))
    return worst
