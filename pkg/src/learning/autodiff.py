#!/usr/bin/env python3
"""
Reverse-mode automatic differentiation over 2-D float64 arrays

A Tape records every kernel executed while it is active; backward() walks
the records in reverse, accumulating gradients into Parameters. Kernels run
without recording when no tape is active (inference).

The tape is single-use: a second backward() on the same tape raises.

British English throughout.
"""

import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float]


class ShapeError(ValueError):
    """Operand shapes do not conform"""


class TapeError(RuntimeError):
    """Misuse of a tape (reuse, empty tape, non-scalar loss)"""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or infinity"""


# ═══════════════════════════════════════════════════════════════════
# TENSORS
# ═══════════════════════════════════════════════════════════════════

class Tensor:
    """Row-major 2-D float64 array"""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {array.shape}")
        self.data = array
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1×1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """Trainable tensor with gradient and Adam state"""

    __slots__ = ("name", "grad", "m", "v", "step")

    def __init__(self, name: str, data: ArrayLike):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ═══════════════════════════════════════════════════════════════════
# TAPE
# ═══════════════════════════════════════════════════════════════════

@dataclass
class _Record:
    name: str
    operands: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """
    Ordered record of kernel applications

    Use as a context manager; kernels executed inside the block are
    recorded on this tape. Tapes are confined to the thread that opened them.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already used for backward; open a new one")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)


def _check_finite(name: str, array: np.ndarray):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} produced non-finite values")


def _emit(name: str, data: np.ndarray, operands: Tuple[Tensor, ...],
          backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    _check_finite(name, data)
    tape = _active_tape()
    needs_grad = tape is not None and any(op.requires_grad for op in operands)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.records.append(_Record(name, operands, out, backward))
    return out


def backward(tape: Tape, loss: Tensor):
    """
    Back-propagate a scalar loss through the tape

    Gradients are accumulated into every reachable Parameter's .grad.
    Intermediate gradients and the records themselves are freed afterwards.

    Args:
        tape: Tape the loss was computed on
        loss: 1×1 tensor

    Raises:
        TapeError on a non-scalar loss, an empty tape or a reused tape
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    if loss.shape != (1, 1):
        raise TapeError(f"loss must be 1×1, got {loss.shape}")
    if not tape.records:
        raise TapeError("tape is empty; nothing to differentiate")

    grads = {id(loss): np.ones((1, 1))}
    for record in reversed(tape.records):
        grad_out = grads.pop(id(record.output), None)
        if grad_out is None:
            continue
        operand_grads = record.backward(grad_out)
        for operand, grad in zip(record.operands, operand_grads):
            if grad is None or not operand.requires_grad:
                continue
            if isinstance(operand, Parameter):
                operand.grad += grad
            elif id(operand) in grads:
                grads[id(operand)] = grads[id(operand)] + grad
            else:
                grads[id(operand)] = grad

    tape.records.clear()
    tape.consumed = True


# ═══════════════════════════════════════════════════════════════════
# KERNELS
# ═══════════════════════════════════════════════════════════════════

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a 1×cols row broadcast over a's rows"""
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.shape == (1, a.shape[1]):
        return _emit("add", a.data + b.data, (a, b),
                     lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError(f"add: {a.shape} + {b.shape}")


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    scalar = float(scalar)
    return _emit("scalar_mul", a.data * scalar, (a,), lambda g: (g * scalar,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes"""
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log σ(x) = -(max(-x, 0) + log1p(exp(-|x|)))"""
    x = a.data
    y = -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    return _emit("log_sigmoid", y, (a,), lambda g: (g * _sigmoid(-x),))


def row_mean(a: Tensor) -> Tensor:
    """Mean over rows → 1×cols"""
    rows = a.shape[0]
    if rows == 0:
        raise ShapeError("row_mean of a tensor with no rows")
    return _emit("row_mean", a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g / rows, rows, axis=0),))


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of table selected by ids (embedding lookup)"""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: ids must be in [0, {table.shape[0]}), got range [{idx.min()}, {idx.max()}]")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _emit("gather_rows", table.data[idx], (table,), _backward)


def concat_rows(*tensors: Tensor) -> Tensor:
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def _backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat_rows", np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), _backward)


def _mask_array(mask: Optional[np.ndarray], shape: Tuple[int, int]) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} does not match {shape}")
    if not np.all(mask.any(axis=1)):
        raise ShapeError("every row needs at least one unmasked entry")
    return mask


def _masked_softmax_array(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        safe = np.where(mask, x, -np.inf)
        shifted = safe - safe.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction"""
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(y)
    return _emit("log_softmax", y, (a,),
                 lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def logsumexp(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row-wise log Σ exp → rows×1

    Args:
        a: Input tensor
        mask: Optional boolean array; False entries are excluded
    """
    mask = _mask_array(mask, a.shape)
    x = a.data if mask is None else np.where(mask, a.data, -np.inf)
    peak = x.max(axis=1, keepdims=True)
    terms = np.exp(x - peak)
    y = peak + np.log(terms.sum(axis=1, keepdims=True))
    p = _masked_softmax_array(a.data, mask)
    return _emit("logsumexp", y, (a,), lambda g: (g * p,))


def masked_softmax(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax; masked-out entries receive probability 0"""
    mask = _mask_array(mask, a.shape)
    y = _masked_softmax_array(a.data, mask)
    return _emit("masked_softmax", y, (a,),
                 lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all entries → 1×1"""
    return _emit("sum", a.data.sum().reshape(1, 1), (a,),
                 lambda g: (np.full_like(a.data, g[0, 0]),))


# ═══════════════════════════════════════════════════════════════════
# OPTIMISER
# ═══════════════════════════════════════════════════════════════════

def unique_parameters(params: Sequence[Parameter]) -> List[Parameter]:
    """Drop repeated references (shared encoders) keeping first-seen order"""
    seen = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def warmup_scale(step: int, warmup_steps: int) -> float:
    """Linear warm-up factor for 1-based step"""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def adam_step(
    params: Sequence[Parameter],
    lr: float = 2e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    warmup_steps: int = 200
) -> float:
    """
    One Adam update with bias correction and linear warm-up

    Gradients are consumed (zeroed) after the update.

    Args:
        params: Parameters with populated gradients
        lr: Peak learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator fuzz
        warmup_steps: Steps over which the learning rate ramps from 0

    Returns:
        Effective learning rate used for this step
    """
    effective_lr = lr
    for p in unique_parameters(params):
        p.step += 1
        effective_lr = lr * warmup_scale(p.step, warmup_steps)
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= effective_lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
    return effective_lr
