"""Dense tensors with a reverse-mode gradient tape.

Values are numpy arrays (float32 unless a different default dtype is set
with :func:`default_dtype`).  Operations record themselves on the active
:class:`Tape` when at least one input requires a gradient; outside a tape they
are plain numpy evaluation.

Non-differentiable forwards (spike encoders) attach their gradient through
:func:`custom_grad`, which passes a value through unchanged and multiplies the
upstream gradient by a caller-supplied local Jacobian diagonal.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "StaleTapeError",
    "tensor",
    "parameter",
    "default_dtype",
    "get_default_dtype",
    "record",
    "matmul",
    "tensor_map",
    "add",
    "sub",
    "mul",
    "scale",
    "clip",
    "tabs",
    "square",
    "tsum",
    "mean",
    "exp",
    "add_bias",
    "reshape",
    "transpose",
    "embedding",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "custom_grad",
    "central_difference",
]


class TensorError(Exception):
    """Base class for tensor-level errors."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class StaleTapeError(TensorError, RuntimeError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _dtype_stack() -> list:
    if not hasattr(_state, "dtypes"):
        _state.dtypes = [np.dtype(np.float32)]
    return _state.dtypes


def get_default_dtype() -> np.dtype:
    return _dtype_stack()[-1]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    stack = _dtype_stack()
    stack.append(np.dtype(dtype))
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """A shape-tagged numeric array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name, dtype=dtype)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("index", "op", "inputs", "output", "backward")

    def __init__(self, index, op, inputs, output, backward):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records operations in creation order and replays them in reverse.

    Use as a context manager; every recorded op appends one node.  A tape can
    be differentiated exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visit_order: list[int] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise StaleTapeError("tape already differentiated; record a new one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _append(self, op, inputs, output, backward) -> _Node:
        node = _Node(len(self.nodes), op, inputs, output, backward)
        self.nodes.append(node)
        return node

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse-accumulate d(loss)/d(leaf) for every leaf that requires grad.

        Leaf ``.grad`` attributes are set (accumulated if already present) and a
        mapping ``{leaf: grad}`` is returned.
        """
        if self._consumed:
            raise StaleTapeError("backward already called on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        node = loss._node
        if node is None or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
            raise StaleTapeError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            self.visit_order.append(node.index)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
                if not np.all(np.isfinite(ig)):
                    raise NonFiniteError(f"non-finite gradient flowing out of op {node.op!r}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._node is None:
                    leaves[key] = inp

        out: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        return out


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op {op!r} produced non-finite values")


def record(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``value`` as the output of ``op`` and put it on the active tape.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    _check_finite(value, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._node = None
    tape = _active_tape()
    if needs and tape is not None:
        out._node = tape._append(op, tuple(inputs), out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched 3-D product with equal batch dimension."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: dimension mismatch {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        if av.ndim == 2:
            return g @ bv.T, av.T @ g
        return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

    return record("matmul", av @ bv, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        _same_shape("add", a, b)
        return record("add", a.data + b.data, (a, b), lambda g: (g, g))
    c = np.asarray(b, dtype=a.dtype)
    return record("add", a.data + c, (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        _same_shape("sub", a, b)
        return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    c = np.asarray(b, dtype=a.dtype)
    return record("sub", a.data - c, (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        _same_shape("mul", a, b)
        av, bv = a.data, b.data
        return record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))
    return scale(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Saturate to [lo, hi]; gradient is 1 strictly inside, 0 elsewhere."""
    if not lo < hi:
        raise ValueError(f"clip: need lo < hi, got lo={lo}, hi={hi}")
    a = _as_tensor(a)
    av = a.data
    inside = (av > lo) & (av < hi)
    return record("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def tabs(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    av = a.data
    return record("square", av * av, (a,), lambda g: (g * (2 * av),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, g, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record("sum", np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    inv = a.dtype.type(1.0 / n)

    def backward(g):
        if axis is None:
            return (np.full(shape, g * inv, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g * inv, axis), shape).copy(),)

    return record("mean", np.asarray(a.data.mean(axis=axis)), (a,), backward)


_MAP_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "abs": tabs,
    "square": square,
    "mean": mean,
}


def tensor_map(a: Tensor, op: str, *aux) -> Tensor:
    """Dispatch an elementwise or reduction op by name."""
    if op == "clip":
        return clip(a, *aux)
    try:
        fn = _MAP_OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(a, *aux)


# ---------------------------------------------------------------------------
# structural ops


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis (the one explicit broadcast)."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if bias.data.ndim != 1 or bias.shape[0] != a.shape[-1]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last axis of {a.shape}")
    lead = tuple(range(a.data.ndim - 1))
    return record("add_bias", a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=lead)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; output shape is ``ids.shape + (dim,)``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"index out of range for table with {table.shape[0]} rows")
    flat = ids.reshape(-1)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, flat, g.reshape(flat.size, -1))
        return (out,)

    return record("embedding", table.data[ids], (table,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", p, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs features {a.shape[-1]}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = xc * inv
    gv = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = g * gv
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", xhat * gv + bias.data, (a, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    x = logits.data.reshape(-1, logits.shape[-1])
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {x.shape[0]} rows")
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = x.shape[0]
    loss = -logp[np.arange(n), t].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1
        return ((g / n) * p.reshape(logits.shape),)

    return record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def custom_grad(source: Tensor, value: np.ndarray, local_jacobian_diag: np.ndarray) -> Tensor:
    """Forward ``value``; backward sends ``g * local_jacobian_diag`` to ``source``."""
    value = np.asarray(value, dtype=source.dtype)
    jac = np.asarray(local_jacobian_diag, dtype=source.dtype)
    if value.shape != source.shape or jac.shape != source.shape:
        raise ShapeError(f"custom_grad: value {value.shape}, jacobian {jac.shape}, source {source.shape}")
    return record("custom_grad", value, (source,), lambda g: (g * jac,))


# ---------------------------------------------------------------------------
# finite differences


def central_difference(fn: Callable[[], float], arrays: Iterable[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``fn()`` w.r.t. each array, in place perturbation."""
    out = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out
