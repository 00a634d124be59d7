"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input is tracked (a ``requires_grad`` leaf or the output of an
earlier recorded op). Outside a tape every op is a plain numpy computation,
which is what evaluation code relies on for speed.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    ...     tape.backward(loss)
    >>> w.grad
    array([2., 4.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "exp",
    "log",
    "abs_",
    "sqrt",
    "sigmoid",
    "elementwise",
    "concat",
    "stack",
    "transpose",
    "take",
    "reshape",
    "getitem",
    "sum_",
    "mean",
    "softmax",
    "log_softmax",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an op's mathematical domain."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    op: str
    out: "Tensor"
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of ops for one forward pass.

    Nodes are appended as ops execute, so inputs always precede the ops that
    consume them and a single reverse sweep is a valid topological order.
    With ``track_kinks`` set, ``min_kink`` records the smallest |argument|
    seen by ``relu`` and ``abs``, which lets finite-difference checks reject
    points sitting on a kink.
    """

    nodes: list = field(default_factory=list)
    next_id: int = 0
    track_kinks: bool = False
    min_kink: float = float("inf")

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def record(self, op: str, out: "Tensor", inputs: tuple, backward_fn) -> "Tensor":
        out.tape_id = self.next_id
        out._tape = self
        self.nodes.append(_Node(op, out, inputs, backward_fn))
        self.next_id += 1
        return out

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            if loss.requires_grad:
                loss.grad = _accum(loss.grad, np.ones_like(loss.data))
                return
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.tape_id + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor):
                    continue
                if t._tape is self:
                    grads[id(t)] = _accum(grads.get(id(t)), gi)
                elif t.requires_grad:
                    leaves[id(t)] = t
                    grads[id(t)] = _accum(grads.get(id(t)), gi)
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _accum(acc, g):
    return g if acc is None else acc + g


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.tape_id = None
        out._tape = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def _tracked(self, tape: Tape) -> bool:
        return self.requires_grad or self._tape is tape

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.tape_id = None
    out._tape = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(t._tracked(tape) for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return op(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("add", _binary(np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("sub", _binary(np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make("mul", _binary(np.multiply, a, b), (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = _binary(np.divide, a, b)

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _make("div", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """2-D matrix product with gradients ``g @ b.T`` and ``a.T @ g``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ----------------------------------------------------------------- unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def _note_kink(x: np.ndarray) -> None:
    tape = active_tape()
    if tape is not None and tape.track_kinks and x.size:
        tape.min_kink = min(tape.min_kink, float(np.min(np.abs(x))))


def relu(a) -> Tensor:
    a = as_tensor(a)
    _note_kink(a.data)
    on = a.data > 0
    return _make("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    _note_kink(a.data)
    sgn = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at 0 is taken as 0 (used by 2-norms of zero vectors)."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make("sqrt", out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "abs": abs_,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("mul", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --------------------------------------------------------------- reductions


def _fast_sum(x: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    # numpy reduces short trailing axes one tiny inner loop at a time; a
    # matrix-vector product is much faster for the [..., C] layouts used here
    if x.ndim >= 2:
        axes = (axis,) if isinstance(axis, int) else axis
        if axes is not None:
            axes = tuple(sorted(ax % x.ndim for ax in axes))
            if axes == (x.ndim - 1,):
                out = x @ np.ones(x.shape[-1])
                return out[..., None] if keepdims else out
            if axes == tuple(range(x.ndim - 1)):
                out = np.ones(x.size // x.shape[-1]) @ x.reshape(-1, x.shape[-1])
                return out.reshape((1,) * (x.ndim - 1) + out.shape) if keepdims else out
    return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=np.float64)


def _max_last(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] <= 8:
        m = x[..., 0].copy()
        for k in range(1, x.shape[-1]):
            np.maximum(m, x[..., k], out=m)
        return m[..., None]
    return x.max(axis=-1, keepdims=True)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = _fast_sum(a.data, axis, keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------- shape / index


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is rejected."""
    a = as_tensor(a)
    idx = index if isinstance(index, tuple) else (index,)
    if not all(i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in idx):
        raise TypeError("only basic indexing is differentiable here")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make("getitem", np.array(a.data[index], dtype=np.float64), (a,), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros(shape)
        fm = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, ax, 0)
        for k, i in enumerate(idx):
            fm[i] += gm[k]
        return (full,)

    return _make("take", np.take(a.data, idx, axis=ax), (a,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero parts")
    nd = parts[0].ndim
    ax = axis % nd if nd else 0
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[k] != parts[0].shape[k] for k in range(nd) if k != ax):
            raise DimensionError(f"concat extents differ: {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _make("concat", out, tuple(parts),
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    n = len(parts)
    return _make("stack", out, tuple(parts),
                 lambda g: tuple(np.take(g, k, axis=ax) for k in range(n)))


# ---------------------------------------------------------------- softmaxes


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{op} received non-finite input")


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    last = axis in (-1, a.ndim - 1)
    z = a.data - (_max_last(a.data) if last else a.data.max(axis=axis, keepdims=True))
    e = np.exp(z)
    out = e / _fast_sum(e, axis, True)

    def bw(g):
        return (out * (g - _fast_sum(g * out, axis, True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    last = axis in (-1, a.ndim - 1)
    z = a.data - (_max_last(a.data) if last else a.data.max(axis=axis, keepdims=True))
    lse = np.log(_fast_sum(np.exp(z), axis, True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * _fast_sum(g, axis, True),)

    return _make("log_softmax", out, (a,), bw)


# ------------------------------------------------------------------ helpers


def backward(loss: Tensor) -> None:
    """Run reverse mode from ``loss`` on the tape that produced it."""
    tape = loss._tape
    if tape is None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            loss.grad = _accum(loss.grad, np.ones_like(loss.data))
        return
    tape.backward(loss)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` must rebuild its output from the current contents of ``params``.
    Returns max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    over every element of every parameter.
    """
    saved = [(p.grad, p.requires_grad) for p in params]
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, (g, rg) in zip(params, saved):
        p.grad, p.requires_grad = g, rg

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check needs contiguous parameter arrays")
        af = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f().item()
            flat[k] = orig - h
            fm = f().item()
            flat[k] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(af[k] - num) / max(1e-8, abs(af[k]) + abs(num))
            worst = max(worst, err)
    return worst
