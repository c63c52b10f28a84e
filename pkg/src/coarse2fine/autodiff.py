"""Small reverse-mode differentiation engine over dense float64 arrays.

A :class:`Tape` records every primitive applied to tracked tensors while it
is active.  :func:`backward` then walks the recorded nodes in reverse and
accumulates adjoints into the leaves.  The tape is rebuilt every training
step, there is no graph caching.

Usage::

    with Tape() as tape:
        w = tape.leaf(np.ones((3, 2)), "w")
        loss = mean(relu(matmul(x, w)))
    grads = backward(tape, loss)        # {"w": ndarray of shape (3, 2)}
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

LOG_EPS = 1e-12
NORM_EPS = 1e-12

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array, optionally tracked by a tape.

    ``node`` is the index of the tape entry that produced the tensor (or the
    leaf slot); ``None`` marks a constant that carries no gradient.
    """

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.tracked else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded primitive application."""

    kind: str
    inputs: tuple[int | None, ...]
    saved: tuple
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives run, so every node's inputs precede it.
    Leaves are trainable arrays registered with :meth:`leaf`.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[str, int] = field(default_factory=dict)
    finalized: bool = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()
        self.finalized = True

    def leaf(self, value, name: str) -> Tensor:
        if name in self.leaves:
            raise KeyError(f"duplicate leaf name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        idx = len(self.nodes)
        self.nodes.append(Node("leaf", (), (), arr.shape))
        self.leaves[name] = idx
        return Tensor(arr, self, idx)

    def record(self, kind: str, inputs: tuple[int | None, ...], saved: tuple, shape) -> int:
        if self.finalized:
            raise RuntimeError("cannot record on a finalized tape")
        idx = len(self.nodes)
        self.nodes.append(Node(kind, inputs, saved, tuple(shape)))
        return idx


# --------------------------------------------------------------------------
# primitive registry
# --------------------------------------------------------------------------

# forward(*arrays, **params) -> (out, saved); adjoint(g, saved, *arrays) -> grads
Forward = Callable[..., tuple[np.ndarray, tuple]]
Adjoint = Callable[..., tuple]
PRIMITIVES: dict[str, tuple[Forward, Adjoint]] = {}


def primitive(kind: str):
    def register(pair):
        PRIMITIVES[kind] = pair()
        return pair

    return register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}") from None
    # only a bias-style broadcast of the second operand is supported
    if out != a.shape and out != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


@primitive("add")
def _add():
    def fwd(a, b):
        _check_broadcast(a, b, "add")
        return a + b, (a.shape, b.shape)

    def adj(g, saved, a, b):
        return _unbroadcast(g, saved[0]), _unbroadcast(g, saved[1])

    return fwd, adj


@primitive("subtract")
def _subtract():
    def fwd(a, b):
        _check_broadcast(a, b, "subtract")
        return a - b, (a.shape, b.shape)

    def adj(g, saved, a, b):
        return _unbroadcast(g, saved[0]), _unbroadcast(-g, saved[1])

    return fwd, adj


@primitive("multiply")
def _multiply():
    def fwd(a, b):
        _check_broadcast(a, b, "multiply")
        return a * b, ()

    def adj(g, saved, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, adj


@primitive("divide")
def _divide():
    def fwd(a, b):
        _check_broadcast(a, b, "divide")
        if np.any(b == 0):
            raise ZeroDivisionError("divide: zero in denominator")
        return a / b, ()

    def adj(g, saved, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

    return fwd, adj


@primitive("scale")
def _scale():
    def fwd(a, *, c):
        return a * c, (c,)

    def adj(g, saved, a):
        return (g * saved[0],)

    return fwd, adj


@primitive("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        return a @ b, ()

    def adj(g, saved, a, b):
        return g @ b.T, a.T @ g

    return fwd, adj


@primitive("relu")
def _relu():
    def fwd(a):
        mask = a > 0
        return np.where(mask, a, 0.0), (mask,)

    def adj(g, saved, a):
        return (g * saved[0],)

    return fwd, adj


@primitive("exp")
def _exp():
    def fwd(a):
        with np.errstate(over="ignore"):
            out = np.exp(a)
        return out, (out,)

    def adj(g, saved, a):
        return (g * saved[0],)

    return fwd, adj


@primitive("log")
def _log():
    # exact log for x > 0; the eps shift is applied only at x == 0
    def fwd(a):
        if np.any(a < 0):
            raise ValueError("log: negative input")
        shifted = np.where(a > 0, a, LOG_EPS)
        return np.log(shifted), (shifted,)

    def adj(g, saved, a):
        return (g / saved[0],)

    return fwd, adj


@primitive("sum")
def _sum():
    def fwd(a, *, axis=None):
        return np.sum(a, axis=axis, keepdims=axis is not None), (axis,)

    def adj(g, saved, a):
        return (np.broadcast_to(g, a.shape).copy(),)

    return fwd, adj


@primitive("mean")
def _mean():
    def fwd(a, *, axis=None):
        n = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis, keepdims=axis is not None), (n,)

    def adj(g, saved, a):
        return (np.broadcast_to(g / saved[0], a.shape).copy(),)

    return fwd, adj


@primitive("concatenate")
def _concatenate():
    def fwd(*arrays, axis=1):
        ref = arrays[0]
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                arr.shape[k] != ref.shape[k] for k in range(ref.ndim) if k != axis
            ):
                raise ValueError("concatenate: shape mismatch")
        splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis), (axis, splits)

    def adj(g, saved, *arrays):
        axis, splits = saved
        return tuple(np.split(g, splits, axis=axis))

    return fwd, adj


@primitive("softmax")
def _softmax():
    def fwd(a):
        if a.ndim != 2:
            raise ValueError("softmax: expects an N x c matrix")
        z = np.exp(a - a.max(axis=1, keepdims=True))
        out = z / z.sum(axis=1, keepdims=True)
        return out, (out,)

    def adj(g, saved, a):
        s = saved[0]
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return fwd, adj


@primitive("l2_normalize")
def _l2_normalize():
    # x / (||x|| + eps), row-wise
    def fwd(a):
        if a.ndim != 2:
            raise ValueError("l2_normalize: expects an N x d matrix")
        norm = np.sqrt(np.sum(a * a, axis=1, keepdims=True))
        denom = norm + NORM_EPS
        return a / denom, (norm, denom)

    def adj(g, saved, a):
        norm, denom = saved
        dot = np.sum(g * a, axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        radial = np.where(norm > 0, dot / (safe * denom * denom), 0.0)
        return (g / denom - a * radial,)

    return fwd, adj


@primitive("stop_gradient")
def _stop_gradient():
    def fwd(a):
        return a.copy(), ()

    def adj(g, saved, a):
        return (None,)

    return fwd, adj


@primitive("straight_through")
def _straight_through():
    # value of the (constant) hard operand, gradient routed to the soft operand
    def fwd(hard, soft):
        if hard.shape != soft.shape:
            raise ValueError("straight_through: shape mismatch")
        return hard.copy(), ()

    def adj(g, saved, hard, soft):
        return None, g

    return fwd, adj


def apply_primitive(kind: str, *inputs, **params) -> Tensor:
    """Run primitive ``kind`` forward and record it on the active tape.

    Nothing is recorded when no input is tracked; the result is then a
    constant.
    """
    try:
        fwd, _ = PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    out, saved = fwd(*arrays, **params)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{kind}: non-finite output")
    tape = _active_tape()
    tracked = [t for t in tensors if t.tracked]
    if tape is None or not tracked:
        return Tensor(out)
    for t in tracked:
        if t.tape is not tape:
            raise RuntimeError("tensor belongs to a different tape")
    ids = tuple(t.node if t.tracked else None for t in tensors)
    idx = tape.record(kind, ids, (saved, tuple(arrays)), out.shape)
    return Tensor(out, tape, idx)


def add(a, b):
    return apply_primitive("add", a, b)


def subtract(a, b):
    return apply_primitive("subtract", a, b)


def multiply(a, b):
    return apply_primitive("multiply", a, b)


def divide(a, b):
    return apply_primitive("divide", a, b)


def scale(a, c: float):
    return apply_primitive("scale", a, c=float(c))


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def relu(a):
    return apply_primitive("relu", a)


def exp(a):
    return apply_primitive("exp", a)


def log(a):
    return apply_primitive("log", a)


def sum_(a, axis: int | None = None):
    return apply_primitive("sum", a, axis=axis)


def mean(a, axis: int | None = None):
    return apply_primitive("mean", a, axis=axis)


def concatenate(tensors, axis: int = 1):
    return apply_primitive("concatenate", *tensors, axis=axis)


def softmax(a):
    """Row-wise softmax with max subtraction."""
    return apply_primitive("softmax", a)


def l2_normalize(a):
    return apply_primitive("l2_normalize", a)


def stop_gradient(a):
    """Identity on the forward pass, zero gradient on the backward pass."""
    return apply_primitive("stop_gradient", a)


def straight_through(hard, soft):
    """Forward value of ``hard``, gradient of ``soft``.

    Same derivative as ``stop_gradient(hard - soft) + soft`` but the forward
    value is ``hard`` bit for bit, without the rounding of the subtraction.
    """
    return apply_primitive("straight_through", hard, soft)


def backward(tape: Tape, output: Tensor, leaves=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. the tape leaves.

    Parameters
    ----------
    tape : Tape
    output : Tensor
        Scalar (single element) tensor recorded on ``tape``.
    leaves : iterable of str, optional
        Leaf names to return; all leaves by default.

    Returns
    -------
    dict
        Leaf name to gradient array of the leaf's shape.  Leaves that do
        not influence ``output`` get zeros.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    names = list(tape.leaves) if leaves is None else list(leaves)
    missing = [n for n in names if n not in tape.leaves]
    if missing:
        raise KeyError(f"unknown leaves {missing}")
    if not output.tracked:
        return {n: np.zeros(tape.nodes[tape.leaves[n]].shape) for n in names}
    if output.tape is not tape:
        raise RuntimeError("output was not recorded on this tape")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[output.node] = np.ones(output.shape)
    for idx in range(output.node, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.kind == "leaf":
            continue
        for src in node.inputs:
            assert src is None or src < idx, "tape is not topologically ordered"
        saved, arrays = node.saved
        _, adj = PRIMITIVES[node.kind]
        for src, gi in zip(node.inputs, adj(g, saved, *arrays)):
            if src is None or gi is None:
                continue
            grads[src] = gi if grads[src] is None else grads[src] + gi
        if idx != output.node:
            grads[idx] = None
    out = {}
    for n in names:
        g = grads[tape.leaves[n]]
        out[n] = np.zeros(tape.nodes[tape.leaves[n]].shape) if g is None else np.asarray(g)
    return out


def finite_difference_gradient(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``loss_fn`` takes a name->array mapping and returns a float.  It is
    evaluated twice at the base point first; differing values mean the
    function is not deterministic and the estimate would be meaningless.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    f0 = float(loss_fn(base))
    if float(loss_fn(base)) != f0:
        raise RuntimeError("loss_fn is not deterministic")
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(base))
            flat[i] = orig - h
            fm = float(loss_fn(base))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads[name] = g
    return grads
