"""Dense 2-D tensors and reverse-mode differentiation for one fixed compute graph.

This is not a general autodiff framework. It supports exactly the primitives
the reconstruction/detection graph needs: matmul, masked row softmax, GELU,
sigmoid, elementwise square, additions, reductions and Frobenius norms. Shapes
are always explicit (no broadcasting beyond a row-vector bias), tensors are
2-D only, and batches are handled by stacking rows.

Float32 is the working precision; float64 is available for gradient
verification against central finite differences (`grad_check`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractViolation

F32 = np.float32
F64 = np.float64

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Inverse norms in frobenius_norm's backward blow up near the kink at 0;
# below this the (sub)gradient is taken as 0.
_NORM_TINY = 1e-12

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _validate(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if arr.ndim != 2:
        raise ContractViolation(f"{what} must be 2-D, got shape {arr.shape}")
    if arr.dtype not in _ALLOWED_DTYPES:
        raise ContractViolation(f"{what} must be float32 or float64, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ContractViolation(f"{what} contains non-finite entries")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class Tensor2:
    """Immutable row-major 2-D float tensor.

    Entries are guaranteed finite at construction; any op that would produce
    NaN/Inf raises instead of propagating poison values.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validate(self.data))
        self.data.setflags(write=False)

    @staticmethod
    def from_array(arr, dtype=F32) -> "Tensor2":
        a = np.asarray(arr, dtype=dtype)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        return Tensor2(a.copy())

    @staticmethod
    def zeros(rows: int, cols: int, dtype=F32) -> "Tensor2":
        return Tensor2(np.zeros((rows, cols), dtype=dtype))

    @staticmethod
    def eye(n: int, dtype=F32) -> "Tensor2":
        return Tensor2(np.eye(n, dtype=dtype))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "Tensor2":
        return Tensor2(self.data.astype(dtype))

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractViolation(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])


# ---------------------------------------------------------------------------
# Pure kernels (ndarray in, ndarray out). The tape reuses these.
# ---------------------------------------------------------------------------


def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul shape mismatch: {a.shape} x {b.shape}"
        )


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_matmul(a, b)
    return a @ b


def _masked_row_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.shape != scores.shape:
        raise ContractViolation(
            f"mask shape {mask.shape} != scores shape {scores.shape}"
        )
    if mask.dtype != np.bool_:
        raise ContractViolation("mask must be boolean")
    if not mask.any(axis=1).all():
        raise ContractViolation("softmax row is fully masked")
    # Per-row max over unmasked entries keeps exp() in range.
    rowmax = np.where(mask, scores, -np.inf).max(axis=1, keepdims=True)
    e = np.zeros_like(scores)
    np.exp(scores - rowmax, where=mask, out=e)
    return e / e.sum(axis=1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x / _SQRT2))).astype(x.dtype, copy=False)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return (cdf + x * phi).astype(x.dtype, copy=False)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + np.log1p(np.exp(-x)), np.log1p(np.exp(x)))


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    """Standard matrix product; raises on inner-dimension mismatch."""
    return Tensor2(_matmul(a.data, b.data))


def masked_row_softmax(scores: Tensor2, mask: np.ndarray) -> Tensor2:
    """Row softmax over unmasked entries; masked positions are exactly zero.

    Every row must keep at least one unmasked entry. Computed with per-row
    max subtraction, so large scores do not overflow.
    """
    return Tensor2(_masked_row_softmax(scores.data, np.asarray(mask)))


def gelu(x: Tensor2) -> Tensor2:
    return Tensor2(_gelu(x.data))


def sigmoid(x: Tensor2) -> Tensor2:
    return Tensor2(_sigmoid(x.data))


def frobenius_norm(x: Tensor2) -> float:
    return float(np.linalg.norm(x.data))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    """One value in a recorded computation. Owned by exactly one tape."""

    value: np.ndarray
    requires_grad: bool
    grad: np.ndarray | None = None
    _backward: Callable[[], None] = field(default=lambda: None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


class Tape:
    """Records primitive ops in execution order.

    Because nodes are appended as they are created, the recorded order is a
    topological order of the graph; `backward` replays it reversed, visiting
    each node exactly once. A tape is single-owner: do not share across
    threads.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _push(self, value: np.ndarray, requires_grad: bool,
              backward: Callable[[Node], None] | None = None) -> Node:
        node = Node(value=_validate(value, "op result"), requires_grad=requires_grad)
        if backward is not None:
            node._backward = lambda: backward(node)
        self.nodes.append(node)
        return node

    def leaf(self, t: Tensor2 | np.ndarray, requires_grad: bool = False) -> Node:
        data = t.data if isinstance(t, Tensor2) else _validate(np.asarray(t))
        node = Node(value=data, requires_grad=requires_grad)
        self.nodes.append(node)
        return node

    def matmul(self, a: Node, b: Node) -> Node:
        out_val = _matmul(a.value, b.value)
        rg = a.requires_grad or b.requires_grad

        def backward(out: Node) -> None:
            a.accumulate(out.grad @ b.value.T)
            b.accumulate(a.value.T @ out.grad)

        return self._push(out_val, rg, backward if rg else None)

    def transpose(self, a: Node) -> Node:
        def backward(out: Node) -> None:
            a.accumulate(out.grad.T)

        return self._push(a.value.T.copy(), a.requires_grad,
                          backward if a.requires_grad else None)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ContractViolation(f"add shape mismatch: {a.shape} vs {b.shape}")
        rg = a.requires_grad or b.requires_grad

        def backward(out: Node) -> None:
            a.accumulate(out.grad)
            b.accumulate(out.grad)

        return self._push(a.value + b.value, rg, backward if rg else None)

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ContractViolation(f"sub shape mismatch: {a.shape} vs {b.shape}")
        rg = a.requires_grad or b.requires_grad

        def backward(out: Node) -> None:
            a.accumulate(out.grad)
            b.accumulate(-out.grad)

        return self._push(a.value - b.value, rg, backward if rg else None)

    def add_bias(self, a: Node, bias: Node) -> Node:
        """Add a 1xC bias row to every row of an NxC matrix."""
        if bias.shape != (1, a.shape[1]):
            raise ContractViolation(
                f"bias shape {bias.shape} does not fit matrix {a.shape}"
            )
        rg = a.requires_grad or bias.requires_grad

        def backward(out: Node) -> None:
            a.accumulate(out.grad)
            bias.accumulate(out.grad.sum(axis=0, keepdims=True))

        return self._push(a.value + bias.value, rg, backward if rg else None)

    def scale(self, a: Node, c: float) -> Node:
        def backward(out: Node) -> None:
            a.accumulate(out.grad * c)

        return self._push(a.value * c, a.requires_grad,
                          backward if a.requires_grad else None)

    def square(self, a: Node) -> Node:
        def backward(out: Node) -> None:
            a.accumulate(out.grad * (2.0 * a.value))

        return self._push(a.value * a.value, a.requires_grad,
                          backward if a.requires_grad else None)

    def masked_row_softmax(self, scores: Node, mask: np.ndarray) -> Node:
        """Softmax over the unmasked entries of each row.

        The mask is a constant: gradients flow only through selected entries
        (top-k selection is treated as fixed during backward).
        """
        out_val = _masked_row_softmax(scores.value, np.asarray(mask))

        def backward(out: Node) -> None:
            y, g = out.value, out.grad
            dot = (g * y).sum(axis=1, keepdims=True)
            scores.accumulate(y * (g - dot))

        return self._push(out_val, scores.requires_grad,
                          backward if scores.requires_grad else None)

    def gelu(self, a: Node) -> Node:
        def backward(out: Node) -> None:
            a.accumulate(out.grad * _gelu_grad(a.value))

        return self._push(_gelu(a.value), a.requires_grad,
                          backward if a.requires_grad else None)

    def sigmoid(self, a: Node) -> Node:
        out_val = _sigmoid(a.value)

        def backward(out: Node) -> None:
            a.accumulate(out.grad * out.value * (1.0 - out.value))

        return self._push(out_val, a.requires_grad,
                          backward if a.requires_grad else None)

    def mean_all(self, a: Node) -> Node:
        """Mean over all entries, as a 1x1 tensor."""
        n = a.value.size
        out_val = np.array([[a.value.mean()]], dtype=a.value.dtype)

        def backward(out: Node) -> None:
            a.accumulate(np.full_like(a.value, out.grad[0, 0] / n))

        return self._push(out_val, a.requires_grad,
                          backward if a.requires_grad else None)

    def mean_rows(self, a: Node) -> Node:
        """Mean over rows, yielding a 1xC tensor."""
        n = a.value.shape[0]
        out_val = a.value.mean(axis=0, keepdims=True)

        def backward(out: Node) -> None:
            a.accumulate(np.repeat(out.grad / n, n, axis=0))

        return self._push(out_val, a.requires_grad,
                          backward if a.requires_grad else None)

    def frobenius_norm(self, a: Node) -> Node:
        """Unsquared Frobenius norm as a 1x1 tensor.

        Subgradient 0 is used at the kink (norm below _NORM_TINY).
        """
        norm = float(np.linalg.norm(a.value))
        out_val = np.array([[norm]], dtype=a.value.dtype)

        def backward(out: Node) -> None:
            if norm < _NORM_TINY:
                return
            a.accumulate(out.grad[0, 0] * (a.value / norm))

        return self._push(out_val, a.requires_grad,
                          backward if a.requires_grad else None)

    def concat_cols(self, a: Node, b: Node) -> Node:
        if a.shape[0] != b.shape[0]:
            raise ContractViolation(
                f"concat row mismatch: {a.shape} vs {b.shape}"
            )
        na = a.shape[1]
        rg = a.requires_grad or b.requires_grad

        def backward(out: Node) -> None:
            a.accumulate(out.grad[:, :na])
            b.accumulate(out.grad[:, na:])

        return self._push(np.concatenate([a.value, b.value], axis=1), rg,
                          backward if rg else None)

    def bce_with_logits(self, z: Node, y: np.ndarray) -> Node:
        """Mean binary cross-entropy over an Nx1 logit column, as 1x1.

        Numerically stable form: softplus(z) - y*z. Labels are constants.
        """
        y = np.asarray(y, dtype=z.value.dtype).reshape(z.shape)
        n = z.value.shape[0]
        loss = float((_softplus(z.value) - y * z.value).mean())
        out_val = np.array([[loss]], dtype=z.value.dtype)

        def backward(out: Node) -> None:
            z.accumulate(out.grad[0, 0] * (_sigmoid(z.value) - y) / n)

        return self._push(out_val, z.requires_grad,
                          backward if z.requires_grad else None)

    def backward(self, loss: Node) -> None:
        """Seed d(loss)/d(loss)=1 and replay the tape in reverse order."""
        if loss.shape != (1, 1):
            raise ContractViolation(f"loss must be 1x1, got {loss.shape}")
        if not np.isfinite(loss.value).all():
            raise ContractViolation("loss is non-finite")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward()
        # Unreached grad-requiring leaves still get a well-defined zero grad.
        for node in self.nodes:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.value)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

LossFn = Callable[[Tape, "list[Node]"], Node]


def grad_check(loss_fn: LossFn, params: Sequence[Tensor2], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn(tape, nodes)` must build the loss (a 1x1 node) for the given
    parameter nodes on the given tape. Params must be float64; the error is
    max over all entries of |analytic - fd| / max(1, |fd|).
    """
    for p in params:
        if p.dtype != np.dtype(F64):
            raise ContractViolation("grad_check requires float64 parameters")

    def eval_loss(values: list[np.ndarray]) -> float:
        tape = Tape()
        nodes = [tape.leaf(v) for v in values]
        loss = loss_fn(tape, nodes)
        val = float(loss.value[0, 0])
        if not math.isfinite(val):
            raise ContractViolation("loss is non-finite during grad_check")
        return val

    tape = Tape()
    nodes = [tape.leaf(p, requires_grad=True) for p in params]
    loss = loss_fn(tape, nodes)
    tape.backward(loss)
    analytic = [
        n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes
    ]

    base = [p.data.copy() for p in params]
    worst = 0.0
    for pi, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = eval_loss(base)
            flat[j] = orig - h
            down = eval_loss(base)
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            a = analytic[pi].reshape(-1)[j]
            err = abs(a - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
