"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record onto the innermost active Tape when at least one input requires a
gradient. Outside a tape every op is a plain forward computation.
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import DEBUG_NUMERICS_ENV
from .errors import DimensionError, DomainError, NumericalError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPES: List["Tape"] = []
_DEBUG = os.environ.get(DEBUG_NUMERICS_ENV, "") not in ("", "0", "false")


def debug_numerics(enabled: bool) -> None:
    """Toggle NaN/Inf checks on every op output."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = ""
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Record:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of differentiable ops; supports exactly one backward pass."""

    def __init__(self):
        self._records: List[_Record] = []
        self._produced: set = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape whose backward pass already ran")
        self._records.append(_Record(out, inputs, backward_fn, op))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape; record a new forward pass first")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.requires_grad and id(loss) not in self._produced:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            rec.out.grad = g
            for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in self._produced:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self._records.clear()
        self._produced.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    """Write d(loss)/d(tensor) into every participating tensor with requires_grad."""
    tape.backward(loss)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by '{op}'")
    out = Tensor._wrap(data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].record(out, inputs, backward_fn, op)
    return out


# ── Linear algebra ──────────────────────────────────────────────


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def _backward(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return _emit("matmul", ad @ bd, (a, b), _backward)


# ── Elementwise ─────────────────────────────────────────────────


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Sigmoid evaluated by sign so exp never sees a large positive argument."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def stable_log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log σ(x) = -(max(-x, 0) + log1p(exp(-|x|)))
    return -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))


def _binary_operand(a: Tensor, b: Union[Tensor, ArrayLike], op: str) -> Tuple[Tensor, bool]:
    if not isinstance(b, Tensor):
        arr = np.asarray(b, dtype=np.float64)
        if arr.ndim == 0:
            return Tensor._wrap(np.full(a.shape, float(arr))), False
        b = Tensor(arr)
    if b.shape == a.shape:
        return b, False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return b, True
    raise DimensionError(f"'{op}' needs equal shapes or a last-axis bias vector: {a.shape} vs {b.shape}")


def _sum_to_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def elementwise(op_kind: str, a: Tensor, b: Union[Tensor, ArrayLike, None] = None) -> Tensor:
    """Apply add/sub/mul (binary) or relu/sigmoid/log_sigmoid/log/exp/square/neg (unary)."""
    x = a.data

    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise DimensionError(f"'{op_kind}' needs two operands")
        b, is_bias = _binary_operand(a, b, op_kind)
        y = b.data
        reduce_b = _sum_to_bias if is_bias else (lambda g: g)

        if op_kind == "add":
            def _backward(g):
                return (g if a.requires_grad else None, reduce_b(g) if b.requires_grad else None)
            return _emit("add", x + y, (a, b), _backward)

        if op_kind == "sub":
            def _backward(g):
                return (g if a.requires_grad else None, -reduce_b(g) if b.requires_grad else None)
            return _emit("sub", x - y, (a, b), _backward)

        def _backward(g):
            return (
                g * y if a.requires_grad else None,
                reduce_b(g * x) if b.requires_grad else None,
            )
        return _emit("mul", x * y, (a, b), _backward)

    if b is not None:
        raise DimensionError(f"'{op_kind}' is unary")

    if op_kind == "relu":
        mask = x > 0
        return _emit("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))

    if op_kind == "sigmoid":
        s = stable_sigmoid(x)
        return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))

    if op_kind == "log_sigmoid":
        out = stable_log_sigmoid(x)
        return _emit("log_sigmoid", out, (a,), lambda g: (g * stable_sigmoid(-x),))

    if op_kind == "log":
        if np.any(x <= 0):
            raise DomainError("log of a nonpositive value")
        return _emit("log", np.log(x), (a,), lambda g: (g / x,))

    if op_kind == "exp":
        out = np.exp(x)
        return _emit("exp", out, (a,), lambda g: (g * out,))

    if op_kind == "square":
        return _emit("square", x * x, (a,), lambda g: (2.0 * g * x,))

    if op_kind == "neg":
        return _emit("neg", -x, (a,), lambda g: (-g,))

    raise ValueError(f"Unknown elementwise op '{op_kind}'")


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def log_sigmoid(a: Tensor) -> Tensor:
    return elementwise("log_sigmoid", a)


def square(a: Tensor) -> Tensor:
    return elementwise("square", a)


# ── Reductions ──────────────────────────────────────────────────


def _check_axis(a: Tensor, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def reduce(op_kind: str, a: Tensor, axis: Optional[int] = None) -> Tensor:
    """sum, mean, max (differentiable) or argmax (forward only, ties to lowest index)."""
    axis = _check_axis(a, axis)
    x = a.data

    if op_kind == "sum":
        def _backward(g):
            g = g if axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)
        return _emit("sum", np.asarray(x.sum(axis=axis)), (a,), _backward)

    if op_kind == "mean":
        count = x.size if axis is None else x.shape[axis]

        def _backward(g):
            g = g if axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, x.shape).copy(),)
        return _emit("mean", np.asarray(x.mean(axis=axis)), (a,), _backward)

    if op_kind == "max":
        idx = np.argmax(x, axis=axis)

        def _backward(g):
            grad = np.zeros_like(x)
            if axis is None:
                grad.reshape(-1)[idx] = g
            else:
                np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
            return (grad,)
        return _emit("max", np.asarray(x.max(axis=axis)), (a,), _backward)

    if op_kind == "argmax":
        # np.argmax returns the first maximal index.
        return Tensor._wrap(np.asarray(np.argmax(x, axis=axis), dtype=np.float64))

    raise ValueError(f"Unknown reduction '{op_kind}'")


def argmax(a: Tensor, axis: Optional[int] = None) -> np.ndarray:
    """Integer argmax indices; ties resolve to the lowest index."""
    return reduce("argmax", a, axis).data.astype(np.int64)


def logsumexp(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = np.exp(x - m)
    total = shifted.sum(axis=-1, keepdims=True)
    out = (m + np.log(total))[..., 0]
    soft = shifted / total
    return _emit("logsumexp", out, (a,), lambda g: (g[..., None] * soft,))


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def _backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (a,), _backward)


def softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


# ── Structural ──────────────────────────────────────────────────


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) of the last axis."""
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError(f"column range [{start}, {stop}) outside width {width}")

    def _backward(g):
        grad = np.zeros_like(a.data)
        grad[..., start:stop] = g
        return (grad,)

    return _emit("columns", a.data[..., start:stop].copy(), (a,), _backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def _backward(g):
        return tuple(g[..., lo:hi].copy() for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), _backward)


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data.copy())
