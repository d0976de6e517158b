"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value in the library is a ``Tensor``: a dense batch-channel-height-width
array of 32-bit floats (64-bit is accepted for high-precision verification
runs).  Gradients are computed with an explicit :class:`Tape`.  Operations
executed while a tape is active append a record to it; :func:`backward` then
walks the records in reverse order and accumulates gradients into the
``grad`` field of every leaf tensor that has ``requires_grad`` set.

Scalars are represented as tensors of shape ``(1, 1, 1, 1)``.

Numerical policy: storage is float32, but every reduction (sums, means,
convolution inner products elsewhere in the package) accumulates in float64
before casting back.  This keeps gradient checks and the branch-fusion
equivalence tests stable without giving up float32 storage semantics.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "record_op",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "safe_div",
    "relu",
    "sigmoid",
    "absolute",
    "clamp",
    "mean_all",
    "sum_all",
]


class Tensor:
    """A 4-D array with optional gradient state.

    Attributes:
        data: the underlying numpy array, shape ``(B, C, H, W)``.
        requires_grad: whether backward passes should produce a gradient
            for this tensor.  Set it on leaves (parameters, probed inputs);
            it propagates automatically to results of taped operations.
        grad: accumulated gradient, same shape as ``data``, or ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        elif dtype is None and arr.dtype == np.float64 and not isinstance(data, np.ndarray):
            # Python lists default to float32 storage; float64 stays only
            # when an ndarray (or explicit dtype) asks for it.
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (B,C,H,W); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1; got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        """Return the scalar value of a (1,1,1,1) tensor."""
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new leaf tensor sharing this tensor's data, without grad state."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the named functions below do the real work.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# The tape
# ---------------------------------------------------------------------------

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed operations, used for reverse traversal.

    Use as a context manager::

        with Tape() as tape:
            loss = some_computation(params)
        backward(loss, tape)

    Operations run while no tape is active are not recorded, which makes
    plain inference free of bookkeeping overhead.
    """

    __slots__ = ("nodes", "_produced")

    def __init__(self):
        # Each node is (inputs, output, backward_fn) where backward_fn maps
        # the output gradient to one gradient array (or None) per input.
        self.nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def record_op(
    inputs: Iterable[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap an op result and record it on the active tape if needed.

    ``backward_fn`` receives the gradient w.r.t. the output and must return
    one array (or ``None``) per input, in order.  It is only invoked during
    :func:`backward`, so it may close over forward intermediates.
    """
    inputs = tuple(inputs)
    out = Tensor(out_data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        tape = _ACTIVE_TAPES[-1]
        out.requires_grad = True
        tape.nodes.append((inputs, out, backward_fn))
        tape._produced.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients for every ``requires_grad`` leaf reachable from ``loss``.

    The tape is traversed in exact reverse order of recording.  Gradients of
    fan-out nodes are summed.  Repeated calls (with fresh tapes) accumulate
    into leaf ``grad`` arrays; call ``zero_grad`` to reset.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    for inputs, out, backward_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for inp, gi in zip(inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if tape.produced(inp):
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
            else:
                inp.accumulate_grad(gi)


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    for da, db in zip(a_shape, b_shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a_shape} and {b_shape} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that were broadcast to reach ``g.shape``."""
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    summed = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return summed.astype(g.dtype)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over singleton axes (and vice versa)."""
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op((a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting; the workhorse of the attention masks."""
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return record_op((a, b), out, bwd)


def neg(x: Tensor) -> Tensor:
    return record_op((x,), -x.data, lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = x.data * np.asarray(c, dtype=x.dtype)
    return record_op((x,), out, lambda g: (g * c,))


def safe_div(num: Tensor, den: Tensor) -> Tensor:
    """``num / den`` where ``den > 0``, exactly 0 (with zero gradient) elsewhere."""
    _check_broadcast(num.shape, den.shape)
    mask = den.data > 0
    den_safe = np.where(mask, den.data, 1.0).astype(num.dtype)
    out = np.where(mask, num.data / den_safe, 0.0).astype(num.dtype)
    num_data = num.data

    def bwd(g):
        gm = np.where(mask, g, 0.0)
        g_num = gm / den_safe
        g_den = -gm * num_data / (den_safe * den_safe)
        return _unbroadcast(g_num, num.shape), _unbroadcast(g_den, den.shape)

    return record_op((num, den), out, bwd)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is defined as 0."""
    out = np.maximum(x.data, 0)
    xd = x.data

    def bwd(g):
        return (np.where(xd > 0, g, 0),)

    return record_op((x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function; outputs lie in (0, 1)."""
    xd = x.data
    out = np.empty_like(xd)
    nonneg = xd >= 0
    out[nonneg] = 1.0 / (1.0 + np.exp(-xd[nonneg]))
    e = np.exp(xd[~nonneg])
    out[~nonneg] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return record_op((x,), out, bwd)


def absolute(x: Tensor) -> Tensor:
    """|x|; the subgradient at 0 is 0 (np.sign convention)."""
    out = np.abs(x.data)
    xd = x.data

    def bwd(g):
        return (g * np.sign(xd),)

    return record_op((x,), out, bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside the closed interval."""
    out = np.clip(x.data, lo, hi)
    xd = x.data

    def bwd(g):
        return (np.where((xd >= lo) & (xd <= hi), g, 0),)

    return record_op((x,), out, bwd)


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, as a (1,1,1,1) scalar tensor (float64 accumulation)."""
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g.astype(x.dtype) / n, shape),)

    return record_op((x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum over every element, as a (1,1,1,1) scalar tensor (float64 accumulation)."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g.astype(x.dtype), shape).copy(),)

    return record_op((x,), out, bwd)
