"""Dense tensors with taped reverse-mode differentiation.

A ``Tensor`` wraps a contiguous float32/float64 numpy buffer. Operations
executed while a ``Tape`` is active are recorded; ``Tape.backward`` replays
the records in reverse creation order, which is a valid topological order,
and writes gradients into every ``requires_grad`` leaf that was touched.

Shapes are always explicit: elementwise ops require identical shapes (the
only broadcast anywhere in the engine is the per-channel conv bias). This
keeps every kernel small enough to verify against finite differences.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GraphError",
    "NumericsError",
    "ShapeError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "apply_op",
    "concat",
    "constant",
    "mean_",
    "mul",
    "permute",
    "reshape",
    "set_finite_checks",
    "slice_",
    "sub",
    "sum_",
]

_SUPPORTED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Tape misuse: backward on a non-scalar, replay without reset, etc."""


class NumericsError(ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs."""


_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    """Globally enable per-op output finiteness validation (slow; for tests)."""
    global _finite_checks
    _finite_checks = bool(enabled)


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.dtype, copy=True)
        else:
            self.grad += g

    # Arithmetic sugar; heavy ops live in rpba.ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean_(self)

    def abs(self):
        return abs_(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}{tag})"


class _Record:
    __slots__ = ("out", "ins", "fn")

    def __init__(self, out, ins, fn):
        self.out = out
        self.ins = ins
        self.fn = fn


_active_tape: "Tape | None" = None


class Tape:
    """Ordered log of primitive applications for one forward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._outer = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._outer
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, ins: tuple[Tensor, ...], fn) -> None:
        if self._consumed:
            raise GraphError("tape already consumed by backward; build a new tape")
        for t in ins:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(out))
        self._records.append(_Record(out, ins, fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf's .grad."""
        if self._consumed:
            raise GraphError("backward called twice on the same tape")
        if loss.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise GraphError("loss tensor was not produced under this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {
            id(loss): np.ones(loss.shape, dtype=loss.dtype)
        }
        for rec in reversed(self._records):
            gout = grads.pop(id(rec.out), None)
            if gout is None:
                continue
            gins = rec.fn(gout)
            for t, g in zip(rec.ins, gins):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] += g
                else:
                    grads[key] = np.ascontiguousarray(g, dtype=t.dtype)
        for key, leaf in self._leaves.items():
            leaf.accumulate_grad(grads.get(key, np.zeros(leaf.shape, dtype=leaf.dtype)))
        self._records.clear()


def _current_tape() -> Tape | None:
    return _active_tape


def apply_op(
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn,
    name: str = "",
) -> Tensor:
    """Wrap a primitive's forward result and register its backward closure.

    ``backward_fn(gout)`` must return one gradient array (or None) per input,
    in order. Recording only happens when a tape is active and some input
    participates in differentiation, so inference runs record-free.
    """
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"non-finite values produced by op '{name or '?'}'")
    tape = _active_tape
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._record(out, inputs, backward_fn)
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = a.data + b.data
        return apply_op(out, (a, b), lambda g: (g, g), "add")
    s = a.dtype.type(b)
    return apply_op(a.data + s, (a,), lambda g: (g,), "add_scalar")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = a.data - b.data
        return apply_op(out, (a, b), lambda g: (g, -g), "sub")
    s = a.dtype.type(b)
    return apply_op(a.data - s, (a,), lambda g: (g,), "sub_scalar")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = a.data * b.data
        ad, bd = a.data, b.data
        return apply_op(out, (a, b), lambda g: (g * bd, g * ad), "mul")
    s = a.dtype.type(b)
    return apply_op(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return apply_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sum_(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(), dtype=dtype)
    return apply_op(out, (a,), lambda g: (np.full(shape, g.reshape(()), dtype=dtype),), "sum")


def mean_(a: Tensor) -> Tensor:
    return mul(sum_(a), 1.0 / a.size)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(out, tuple(tensors), backward, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    in_shape = a.shape
    out = a.data.reshape(shape)
    return apply_op(out, (a,), lambda g: (g.reshape(in_shape),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return apply_op(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (slices and ints only, so elements are selected at most once)."""
    out = np.ascontiguousarray(a.data[key])
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return apply_op(out, (a,), backward, "slice")
