"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Values are plain numpy arrays wrapped in :class:`Tensor`. Every primitive
application made while a :class:`Tape` is active is appended to that tape;
:func:`backward` walks the tape once in reverse to accumulate adjoints.

Broadcasting is deliberately narrow: ``add``/``sub`` accept either equal
shapes or an ``(m, n)`` array combined with an ``(m,)`` column vector, which
is all a batched dense layer needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "finite_difference_gradient",
    "constant",
    "matmul",
    "add",
    "sub",
    "scalar_mul",
    "mul",
    "sum",
    "dot",
    "sin",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "square",
    "clip",
    "softplus_np",
    "sigmoid_np",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Tensor:
    """An immutable float64 array that may be a node on a tape."""

    __slots__ = ("value", "__weakref__")

    def __init__(self, value):
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        self.value = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, value={self.value!r})"

    # Operator sugar; each maps onto exactly one primitive.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    operands: tuple[Tensor, ...]
    output: Tensor
    # adjoint rule: (output adjoint, operand values, output value, attrs) -> operand adjoints
    attrs: tuple


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records. ``Tape(record=False)`` evaluates without recording.
    """

    _stack: list["Tape"] = []

    def __init__(self, record: bool = True):
        self.record = record
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# numerically safe scalar helpers (also used outside the tape)

def softplus_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # log1p(exp(-|x|)) + max(x, 0) never overflows
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# primitive table: name -> (arity, shape check, forward, adjoint)

def _shapes_equal(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _check_addlike(name, a, b):
    if a.shape == b.shape:
        return
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[0]:
        return
    raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # (m, n) adjoint flowing into an (m,) column-broadcast operand
    return grad.sum(axis=1)


def _bcast(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return b[:, None] if (a.ndim == 2 and b.ndim == 1) else b


def _check_matmul(name, a, b):
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _check_dot(name, a, b):
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _no_check(name, *arrays):
    return None


def _matmul_adj(g, vals, out, attrs):
    a, b = vals
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _softplus_adj(g, vals, out, attrs):
    return (g * sigmoid_np(vals[0]),)


def _relu_adj(g, vals, out, attrs):
    # derivative at exactly 0 is 0
    return (g * (vals[0] > 0.0),)


def _clip_adj(g, vals, out, attrs):
    lo, hi = attrs
    x = vals[0]
    return (g * ((x > lo) & (x < hi)),)


PRIMITIVES: dict[str, tuple[int, Callable, Callable, Callable]] = {
    "matmul": (2, _check_matmul, lambda a, b: a @ b, _matmul_adj),
    "add": (
        2,
        _check_addlike,
        lambda a, b: a + _bcast(a, b),
        lambda g, v, o, at: (g, _reduce_to(g, v[1].shape)),
    ),
    "sub": (
        2,
        _check_addlike,
        lambda a, b: a - _bcast(a, b),
        lambda g, v, o, at: (g, -_reduce_to(g, v[1].shape)),
    ),
    "scalar-mul": (1, _no_check, lambda a, *, k: a * k, lambda g, v, o, at: (g * at[0],)),
    "elementwise-mul": (
        2,
        _shapes_equal,
        lambda a, b: a * b,
        lambda g, v, o, at: (g * v[1], g * v[0]),
    ),
    "sum": (1, _no_check, lambda a: np.sum(a), lambda g, v, o, at: (np.full(v[0].shape, g),)),
    "dot": (2, _check_dot, lambda a, b: np.dot(a, b), lambda g, v, o, at: (g * v[1], g * v[0])),
    "sin": (1, _no_check, np.sin, lambda g, v, o, at: (g * np.cos(v[0]),)),
    "relu": (1, _no_check, lambda a: np.maximum(a, 0.0), _relu_adj),
    "sigmoid": (1, _no_check, sigmoid_np, lambda g, v, o, at: (g * o * (1.0 - o),)),
    "softplus": (1, _no_check, softplus_np, _softplus_adj),
    "log": (1, _no_check, np.log, lambda g, v, o, at: (g / v[0],)),
    "exp": (1, _no_check, np.exp, lambda g, v, o, at: (g * o,)),
    "square": (1, _no_check, np.square, lambda g, v, o, at: (2.0 * g * v[0],)),
    "clip": (1, _no_check, lambda a, *, lo, hi: np.clip(a, lo, hi), _clip_adj),
}


def apply_primitive(op: str, *operands: Tensor, **attrs) -> Tensor:
    """Evaluate primitive ``op`` and record it on the active tape, if any."""
    try:
        arity, check, fwd, _ = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if len(operands) != arity:
        raise ShapeError(f"{op}: expected {arity} operands, got {len(operands)}")
    operands = tuple(_as_tensor(x) for x in operands)
    vals = [t.value for t in operands]
    check(op, *vals)
    with np.errstate(all="ignore"):
        out = Tensor(fwd(*vals, **attrs))
    if not np.isfinite(out.value).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    tape = Tape.current()
    if tape is not None and tape.record:
        tape.entries.append(TapeEntry(op, operands, out, tuple(attrs.values())))
    return out


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def scalar_mul(a, k: float):
    return apply_primitive("scalar-mul", a, k=float(k))


def mul(a, b):
    return apply_primitive("elementwise-mul", a, b)


def sum(a):  # noqa: A001 - mirrors the primitive name
    return apply_primitive("sum", a)


def dot(a, b):
    return apply_primitive("dot", a, b)


def sin(a):
    return apply_primitive("sin", a)


def relu(a):
    return apply_primitive("relu", a)


def sigmoid(a):
    return apply_primitive("sigmoid", a)


def softplus(a):
    return apply_primitive("softplus", a)


def log(a):
    return apply_primitive("log", a)


def exp(a):
    return apply_primitive("exp", a)


def square(a):
    return apply_primitive("square", a)


def clip(a, lo: float, hi: float):
    return apply_primitive("clip", a, lo=float(lo), hi=float(hi))


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node on ``tape``.

    Returns a mapping ``id(tensor) -> gradient``. When ``wrt`` is given, every
    listed tensor gets an entry (zeros if the loss does not depend on it).
    """
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for entry in reversed(tape.entries):
        g = adj.get(id(entry.output))
        if g is None:
            continue
        rule = PRIMITIVES[entry.op][3]
        vals = [t.value for t in entry.operands]
        grads = rule(g, vals, entry.output.value, entry.attrs)
        for operand, og in zip(entry.operands, grads):
            key = id(operand)
            if key in adj:
                adj[key] = adj[key] + og
            else:
                adj[key] = np.asarray(og, dtype=np.float64)
    if wrt is not None:
        for t in wrt:
            adj.setdefault(id(t), np.zeros_like(t.value))
    return adj


def grad_of(adj: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = adj.get(id(t))
    return np.zeros_like(t.value) if g is None else g


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def value_and_grad(f: Callable[..., Tensor], *arrays: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Convenience: evaluate ``f`` on fresh leaves and return (value, grads)."""
    leaves = [Tensor(a) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    adj = backward(out, tape, wrt=leaves)
    return float(out.value), [adj[id(t)] for t in leaves]


def stack_sum(terms: Sequence[Tensor]) -> Tensor:
    """Sum a list of scalar tensors with ``add``."""
    it = iter(terms)
    total = next(it)
    for t in it:
        total = add(total, t)
    return total
