"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` (see ``with Tape():``).
Outside a tape they just compute values, which is how inference runs.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)[x]
    array(6.)
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "TapeConsumedError",
    "backward",
    "grad_check",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "sigmoid",
    "tanh",
    "sin",
    "square",
    "sum",
    "mean",
    "broadcast",
    "gather",
    "concat",
    "reshape",
    "transpose",
    "index",
    "detach",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeConsumedError(RuntimeError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "heatflow_tape", default=None
)


class Tensor:
    """Dense float64 array plus the bookkeeping needed for reverse mode."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return len(self.value)

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __rmatmul__ = lambda self, o: matmul(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, key: index(self, key)  # noqa: E731

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("output", "inputs", "pullback")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], pullback):
        self.output = output
        self.inputs = inputs
        self.pullback = pullback


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in execution order, so the list is already a
    topological order and the backward sweep simply walks it in reverse.
    A tape may be swept once; a second :meth:`backward` raises
    :class:`TapeConsumedError`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], pullback) -> None:
        output.node_id = len(self.nodes)
        output.tape = self
        self.nodes.append(_Node(output, inputs, pullback))

    def backward(self, root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf.

        Returns a dict keyed by leaf tensor. Leaves without a path to ``root``
        get a zero gradient.
        """
        if self.consumed:
            raise TapeConsumedError("tape already swept; record a new forward pass")
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
        seen_leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.pullback(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not _tracks(t, self):
                    continue
                if t.tape is not self:
                    seen_leaves[id(t)] = t
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if root.tape is not self and root.requires_grad:
            seen_leaves[id(root)] = root

        out = {}
        targets = list(leaves) if leaves is not None else list(seen_leaves.values())
        for leaf in targets:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.value)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        return out


def backward(tape: Tape, root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    return tape.backward(root, leaves)


def _tracks(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t.tape is tape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, inputs: Sequence[Tensor], pullback) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = False
    out.grad = None
    out.name = None
    out.node_id = None
    out.tape = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(_tracks(t, tape) for t in inputs):
        tape.record(out, tuple(inputs), pullback)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv

    def pullback(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _emit(out, (a, b), pullback)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value

    def pullback(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(av @ bv, (a, b), pullback)


# -- elementwise unary -------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value < 0):
        raise DomainError("log of a negative value")
    av = a.value
    with np.errstate(divide="ignore"):
        out = np.log(av)
    return _emit(out, (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0 (subgradient)."""
    a = as_tensor(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.value)

    def pullback(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _emit(out, (a,), pullback)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _emit(out, (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit(av * av, (a,), lambda g: (2.0 * g * av,))


# -- reductions and shape ----------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    return _emit(
        np.asarray(out, dtype=np.float64),
        (a,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.mean(a.value, axis=axis, keepdims=keepdims)
    return _emit(
        np.asarray(out, dtype=np.float64),
        (a,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,),
    )


def broadcast(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    src = a.shape
    return _emit(np.array(out), (a,), lambda g: (_unbroadcast(g, src),))


def gather(a, idx) -> Tensor:
    """Rows of ``a`` selected by an integer array of any shape (``a[idx]``)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def pullback(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.value[idx], (a,), pullback)


def index(a, key) -> Tensor:
    """General numpy indexing with a scatter-add pullback."""
    a = as_tensor(a)
    shape = a.shape

    def pullback(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _emit(np.array(a.value[key]), (a,), pullback)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _emit(out, (a,), lambda g: (np.transpose(g, inverse),))


def detach(a) -> Tensor:
    """Same value, cut from the tape (treated as a constant during backward)."""
    return Tensor(as_tensor(a).value)


# -- validation --------------------------------------------------------------


def grad_check(
    function: Callable[[Tensor], Tensor], point, epsilon: float = 1e-6
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    The relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(as_tensor(point).value, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = function(x)
    analytic = tape.backward(y, [x])[x]

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += epsilon
        xm[i] -= epsilon
        fp = function(Tensor(xp.reshape(x0.shape))).item()
        fm = function(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
