"""Reverse-mode automatic differentiation on dense float64 arrays.

Forward evaluation is eager: every operation computes its result
immediately and, when a tape is supplied, records a closure that knows how
to push gradients back to its inputs. Calling ``Tape.backward`` on a
scalar output replays the closures in reverse order. Gradients accumulate
with ``+=`` so tensors reused in several places receive the sum of all
contributions.

Only the operations the training method needs are provided, and all
tensors are 2-D. There is no broadcasting beyond what the individual
operations document.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "div",
    "add_n",
    "affine",
    "scale_by",
    "relu",
    "sigmoid",
    "log",
    "clamp_min",
    "softmax",
    "sum_all",
    "mean_all",
    "gather_rows",
    "euclidean_distance",
    "pairwise_distances",
    "grad_reverse",
    "init_velocity",
    "sgd_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Backward was requested on a tape that recorded nothing."""


class Tensor:
    """A 2-D float64 array paired with a same-shape gradient buffer.

    1-D input is promoted to a single row. Values are copied on
    construction so a tensor never aliases caller-owned memory.
    """

    __slots__ = ("values", "grad")

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.values = arr
        self.grad = np.zeros_like(arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self) -> None:
        self._rules: list = []

    def record(self, rule) -> None:
        self._rules.append(rule)

    def __len__(self) -> int:
        return len(self._rules)

    def backward(self, output: Tensor) -> None:
        """Seed ``output`` with gradient 1 and replay all rules in reverse."""
        if not self._rules:
            raise TapeError("backward on an empty tape: no operations were recorded")
        if output.values.shape != (1, 1):
            raise ShapeError(
                f"backward seed must be a 1x1 scalar, got shape {output.shape}"
            )
        output.grad += 1.0
        for rule in reversed(self._rules):
            rule()


def _record(tape: Tape | None, rule) -> None:
    if tape is not None:
        tape.record(rule)


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)

    def backward() -> None:
        a.grad += out.grad @ b.values.T
        b.grad += a.values.T @ out.grad

    _record(tape, backward)
    return out


def add_bias(tape: Tape | None, x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x m bias row to every row of an n x m tensor."""
    if bias.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit rows of {x.shape}")
    out = Tensor(x.values + bias.values)

    def backward() -> None:
        x.grad += out.grad
        bias.grad += out.grad.sum(axis=0, keepdims=True)

    _record(tape, backward)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = Tensor(a.values + b.values)

    def backward() -> None:
        a.grad += out.grad
        b.grad += out.grad

    _record(tape, backward)
    return out


def sub(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    out = Tensor(a.values - b.values)

    def backward() -> None:
        a.grad += out.grad
        b.grad -= out.grad

    _record(tape, backward)
    return out


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _require_same_shape("mul", a, b)
    out = Tensor(a.values * b.values)

    def backward() -> None:
        a.grad += out.grad * b.values
        b.grad += out.grad * a.values

    _record(tape, backward)
    return out


def div(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient a / b of two same-shape tensors."""
    _require_same_shape("div", a, b)
    out = Tensor(a.values / b.values)

    def backward() -> None:
        a.grad += out.grad / b.values
        b.grad -= out.grad * out.values / b.values

    _record(tape, backward)
    return out


def add_n(tape: Tape | None, tensors: list[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shape tensors."""
    if not tensors:
        raise ShapeError("add_n: empty tensor list")
    first = tensors[0]
    for t in tensors[1:]:
        _require_same_shape("add_n", first, t)
    out = Tensor(sum(t.values for t in tensors))

    def backward() -> None:
        for t in tensors:
            t.grad += out.grad

    _record(tape, backward)
    return out


def affine(tape: Tape | None, x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with scalar constants."""
    out = Tensor(scale * x.values + shift)

    def backward() -> None:
        x.grad += scale * out.grad

    _record(tape, backward)
    return out


def scale_by(tape: Tape | None, x: Tensor, factor: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array; no gradient into factor."""
    fac = np.asarray(factor, dtype=np.float64)
    if fac.shape != x.values.shape:
        raise ShapeError(f"scale_by: factor {fac.shape} vs tensor {x.shape}")
    out = Tensor(x.values * fac)

    def backward() -> None:
        x.grad += out.grad * fac

    _record(tape, backward)
    return out


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is taken as 0.
    mask = x.values > 0.0
    out = Tensor(np.where(mask, x.values, 0.0))

    def backward() -> None:
        x.grad += out.grad * mask

    _record(tape, backward)
    return out


def sigmoid(tape: Tape | None, x: Tensor) -> Tensor:
    """Logistic function, computed without overflow for any finite input.

    The output is nudged into the open interval (0, 1) so downstream
    probability guards never see an exact 0 or 1 from float rounding.
    """
    v = x.values
    s = np.empty_like(v)
    pos = v >= 0.0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    np.clip(s, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0), out=s)
    out = Tensor(s)

    def backward() -> None:
        x.grad += out.grad * out.values * (1.0 - out.values)

    _record(tape, backward)
    return out


def log(tape: Tape | None, x: Tensor) -> Tensor:
    if np.any(x.values <= 0.0):
        raise ValueError("log: all entries must be positive")
    out = Tensor(np.log(x.values))

    def backward() -> None:
        x.grad += out.grad / x.values

    _record(tape, backward)
    return out


def clamp_min(tape: Tape | None, x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient is zero where the clamp binds."""
    mask = x.values > floor
    out = Tensor(np.where(mask, x.values, floor))

    def backward() -> None:
        x.grad += out.grad * mask

    _record(tape, backward)
    return out


def softmax(tape: Tape | None, logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for overflow safety."""
    if logits.shape[1] < 2:
        raise ShapeError(f"softmax: need at least 2 columns, got {logits.shape}")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=1, keepdims=True))

    def backward() -> None:
        g = out.grad
        p = out.values
        logits.grad += p * (g - (g * p).sum(axis=1, keepdims=True))

    _record(tape, backward)
    return out


def sum_all(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(np.array([[x.values.sum()]]))

    def backward() -> None:
        x.grad += out.grad[0, 0]

    _record(tape, backward)
    return out


def mean_all(tape: Tape | None, x: Tensor) -> Tensor:
    n = x.values.size
    out = Tensor(np.array([[x.values.mean()]]))

    def backward() -> None:
        x.grad += out.grad[0, 0] / n

    _record(tape, backward)
    return out


def gather_rows(tape: Tape | None, x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one column per row: out[i, 0] = x[i, indices[i]]."""
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(
            f"gather_rows: need one index per row of {x.shape}, got {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(
            f"gather_rows: index out of range for {x.shape[1]} columns"
        )
    rows = np.arange(x.shape[0])
    out = Tensor(x.values[rows, idx].reshape(-1, 1))

    def backward() -> None:
        np.add.at(x.grad, (rows, idx), out.grad[:, 0])

    _record(tape, backward)
    return out


def euclidean_distance(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Unsquared Euclidean distance between two same-shape tensors.

    At zero distance the gradient is taken as zero (the subgradient at the
    kink), so coincident points are safe.
    """
    _require_same_shape("euclidean_distance", a, b)
    diff = a.values - b.values
    dist = float(np.sqrt((diff * diff).sum()))
    out = Tensor(np.array([[dist]]))

    def backward() -> None:
        if dist > 0.0:
            unit = diff / dist
            a.grad += out.grad[0, 0] * unit
            b.grad -= out.grad[0, 0] * unit

    _record(tape, backward)
    return out


def pairwise_distances(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """All unsquared Euclidean distances between rows of a and rows of b.

    Computed from explicit row differences rather than the expanded
    quadratic form, so small distances do not lose precision to
    cancellation. Zero-distance pairs get zero gradient.
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"pairwise_distances: feature dims differ, {a.shape} vs {b.shape}"
        )
    diff = a.values[:, None, :] - b.values[None, :, :]  # n x m x d
    dist = np.sqrt((diff * diff).sum(axis=2))
    out = Tensor(dist)

    def backward() -> None:
        safe = np.where(dist > 0.0, dist, 1.0)
        scaled = (out.grad * (dist > 0.0) / safe)[:, :, None] * diff
        a.grad += scaled.sum(axis=1)
        b.grad -= scaled.sum(axis=0)

    _record(tape, backward)
    return out


def grad_reverse(tape: Tape | None, x: Tensor, coeff: float) -> Tensor:
    """Identity forward; backward multiplies the gradient by -coeff."""
    if coeff < 0.0:
        raise ValueError(f"grad_reverse: coeff must be >= 0, got {coeff}")
    out = Tensor(x.values)

    def backward() -> None:
        x.grad -= coeff * out.grad

    _record(tape, backward)
    return out


def init_velocity(params: list[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.values) for p in params]


def sgd_step(
    params: list[Tensor],
    lr: float,
    momentum: float,
    velocity: list[np.ndarray],
) -> None:
    """One in-place SGD update with classical momentum.

    v <- momentum * v + grad; param <- param - lr * v. Gradients are
    cleared afterwards so the next forward pass starts fresh.
    """
    if len(params) != len(velocity):
        raise ValueError(
            f"sgd_step: {len(params)} params but {len(velocity)} velocity slots"
        )
    for p, v in zip(params, velocity):
        v *= momentum
        v += p.grad
        p.values -= lr * v
        p.zero_grad()
