"""Dense tensors with a small reverse-mode autodiff engine.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their inputs and a closure mapping the output gradient to
input gradients. :func:`backward` walks that graph in reverse topological
order. Graphs are single-use: once a backward pass has run through a node,
its closure is released and a second pass raises.

Training runs in float32; gradient verification casts everything to float64
(see :func:`finite_difference_grad`).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff graph (reuse, non-scalar roots, ...)."""


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "",
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward_fn = backward_fn
        self._consumed = False
        self.op = op

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """New leaf sharing this tensor's data."""
        return Tensor(self.data, requires_grad=requires_grad)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        extra = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{extra})"

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` always exists and matches ``value``'s shape."""

    def __init__(self, data, path: str = ""):
        arr = np.array(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=True)
        self.path = path
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.path!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (process-wide) for inference passes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording the graph only when some input needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ops -------------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(out, (a, b), backward, "div")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(1)

    def backward(g):
        return (np.broadcast_to(g.reshape(()), a.shape).astype(a.dtype),)

    return make_op(out, (a,), backward, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype).reshape(1)

    def backward(g):
        return (np.full(a.shape, g.reshape(()) / n, dtype=a.dtype),)

    return make_op(out, (a,), backward, "mean")


# -- channel-structure ops -------------------------------------------------
def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (n, c_i, h, w) tensors along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"cannot concat {t.shape} with {tensors[0].shape} along channels")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_op(out, tuple(tensors), backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)`` of a 4-D tensor."""
    c = x.shape[1]
    if not 0 <= start <= stop <= c:
        raise ValueError(f"channel slice [{start}, {stop}) out of range for {c} channels")
    out = x.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_op(out, (x,), backward, "slice")


# -- graph traversal -------------------------------------------------------
def _topological(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(
    roots: Tensor | Sequence[Tensor],
    grads: np.ndarray | Sequence[np.ndarray] | None = None,
    param_grads: dict | None = None,
) -> None:
    """Propagate gradients from ``roots`` to every reachable leaf.

    With a single scalar root and no ``grads`` the seed gradient is one.
    Leaf gradients are *added* to ``leaf.grad``. When ``param_grads`` is
    given, :class:`Parameter` leaves accumulate into ``param_grads[param]``
    instead, which lets several workers back-propagate through shared
    weights without touching them.
    """
    if isinstance(roots, Tensor):
        roots = [roots]
        if grads is not None:
            grads = [grads]
    roots = list(roots)
    if grads is None:
        if len(roots) != 1 or roots[0].size != 1:
            raise GraphError("backward without explicit grads needs one scalar root")
        grads = [np.ones_like(roots[0].data)]
    grads = list(grads)
    if len(grads) != len(roots):
        raise GraphError("need one gradient per root")

    for r in roots:
        if r._consumed:
            raise GraphError("graph already consumed by a previous backward pass")

    pending: dict[int, np.ndarray] = {}
    live = [(r, g) for r, g in zip(roots, grads) if r.requires_grad]
    for r, g in live:
        g = np.asarray(g, dtype=r.dtype)
        if g.shape != r.shape:
            raise GraphError(f"gradient shape {g.shape} does not match root {r.shape}")
        pending[id(r)] = pending[id(r)] + g if id(r) in pending else g

    for node in reversed(_topological([r for r, _ in live])):
        g = pending.pop(id(node), None)
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        if node.is_leaf:
            if g is None:
                continue
            if param_grads is not None and isinstance(node, Parameter):
                if node in param_grads:
                    param_grads[node] = param_grads[node] + g
                else:
                    param_grads[node] = g.copy()
            elif node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            continue
        fn = node._backward_fn
        node._backward_fn = None
        node._consumed = True
        if g is None:
            continue
        for parent, pg in zip(node._parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
        node._parents = ()


def finite_difference_grad(loss_fn: Callable[[], "Tensor | float"], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d loss / d param, one entry at a time.

    ``loss_fn`` must be deterministic (no active dropout). ``param.data`` is
    perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")

    def value() -> float:
        out = loss_fn()
        return out.item() if isinstance(out, Tensor) else float(out)

    base = value()
    if value() != base:
        raise ValueError("loss_fn is not deterministic; disable stochastic layers")
    flat = param.data.reshape(-1)
    est = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value()
        flat[i] = orig - h
        down = value()
        flat[i] = orig
        est[i] = (up - down) / (2 * h)
    return est.reshape(param.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference, zero when both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
