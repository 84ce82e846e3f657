"""Tape-based reverse-mode differentiation over dense float64 arrays, plus Adam.

Tensors are immutable wrappers around numpy arrays. Operations always compute
their value; when a :class:`Tape` is active on the current thread they are also
recorded so that :meth:`Tape.gradient` can replay them backwards.

Supported primitives: add, mul, matmul, transpose, tanh, exp, log, square,
sum, mean, concat, take, mask, affine. Everything else (subtraction, division,
square roots, hinges) is composed from these.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "forward", "backward",
    "add", "mul", "matmul", "transpose", "tanh", "exp", "log", "square",
    "sum", "mean", "concat", "take", "mask", "affine",
    "sub", "neg", "sqrt", "reciprocal", "relu",
    "AdamState", "adam_step",
]

_local = threading.local()


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value produced by primitive '{op}'")


class Tensor:
    __slots__ = ("value",)

    def __init__(self, value):
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("leaf tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.value = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        arr.setflags(write=False)
        t.value = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor({self.value!r})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; leaves passed through :meth:`watch` are the
    default gradient sources.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()

    def watch(self, t) -> Tensor:
        t = t if isinstance(t, Tensor) else Tensor(t)
        self.leaves.append(t)
        return t

    def gradient(self, output: Tensor, sources=None) -> list[np.ndarray]:
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        sources = self.leaves if sources is None else sources
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not isinstance(inp, Tensor):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.value) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape))
        return out


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(op: str, value, inputs: tuple, backward) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NonFiniteError(op)
    out = Tensor._wrap(value)
    tape = _active_tape()
    if tape is not None:
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def forward(fn, *leaves):
    """Evaluate ``fn(*leaves)`` on a fresh tape; returns ``(output, tape)``."""
    with Tape() as tape:
        watched = [tape.watch(x) for x in leaves]
        out = fn(*watched)
    return out, tape


def backward(tape: Tape, output: Tensor) -> list[np.ndarray]:
    """Gradient of scalar ``output`` with respect to each leaf watched on ``tape``."""
    return tape.gradient(output)


# -- primitives ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(av)
    return _emit("log", y, (a,), lambda g: (g / av,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.value.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _emit("mean", a.value.mean(axis=axis, keepdims=keepdims), (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.value for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a, index, axis=0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        if axis == 0:
            np.add.at(out, index, g)
        else:
            moved = np.moveaxis(out, axis, 0)
            np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _emit("take", np.take(a.value, index, axis=axis), (a,), bw)


def mask(a, m) -> Tensor:
    """Multiply by a constant array; no gradient flows to ``m``."""
    a = _as_tensor(a)
    m = np.asarray(m, dtype=np.float64)
    shape = a.shape
    return _emit("mask", a.value * m, (a,), lambda g: (_unbroadcast(g * m, shape),))


def affine(a, scale=1.0, shift=0.0) -> Tensor:
    """``scale * a + shift`` with constant scale and shift."""
    a = _as_tensor(a)
    shape = a.shape
    return _emit("affine", scale * a.value + shift, (a,),
                 lambda g: (_unbroadcast(g * scale, shape),))


# -- composites ---------------------------------------------------------------

def neg(a) -> Tensor:
    return affine(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, affine(b, -1.0))


def sqrt(a) -> Tensor:
    return exp(affine(log(a), 0.5))


def reciprocal(a) -> Tensor:
    return exp(neg(log(a)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return mask(a, a.value > 0)


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam descent step. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or mi.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
