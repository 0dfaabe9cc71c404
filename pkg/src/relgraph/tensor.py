"""Float64 tensors with a reverse-mode gradient tape.

Ops run eagerly on numpy arrays. While a ``Tape`` is active (used as a
context manager), every op that touches a gradient-tracked tensor records a
backward closure; ``Tape.backward`` replays them in exact reverse order and
accumulates gradients into the ``grad`` buffers of the leaf tensors that were
created with ``requires_grad=True``. With no active tape the ops are plain
numpy calls, which keeps repeated evaluation (finite differences, inference)
cheap.

``finite_diff_check`` is the independent numerical oracle used to validate
any gradient this module produces.
"""

from __future__ import annotations

import threading
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_rowvec",
    "relu",
    "affine",
    "row_softmax",
    "row_sigmoid",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "repeat_rows",
    "spatial_mean",
    "neg_pairwise_sqdist",
    "sum_all",
    "softmax_xent_mean",
    "bce_sum",
    "one_hot_argmax_rows",
    "corrupt_grad_identity",
    "finite_diff_check",
    "finite_diff_report",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class Tensor:
    """Dense float64 array, immutable by convention once built.

    ``grad`` exists only on tensors created with ``requires_grad=True`` (the
    trainable leaves); it always has the same shape as ``data`` and
    accumulates additively across backward passes until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _TapeOp(NamedTuple):
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_STATE, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Ops append in execution order, so inputs always precede their consumers;
    ``backward`` walks the list once in reverse. Independent tapes may live
    on different threads, but a single tape is not thread safe.
    """

    def __init__(self):
        self.ops: list[_TapeOp] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.stack.pop()

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

        Gradients from fan-out (one tensor consumed by several ops) add
        together. Raises ``ShapeError`` if ``loss`` is not a scalar.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss.requires_grad:
            loss.grad += np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            for t, ig in zip(op.inputs, op.backward(g)):
                if ig is None:
                    continue
                if t.requires_grad:
                    t.grad += ig
                elif id(t) in self._tracked:
                    acc = grads.get(id(t))
                    if acc is None:
                        grads[id(t)] = np.array(ig, dtype=np.float64)
                    else:
                        acc += ig


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(name: str, inputs: tuple[Tensor, ...], output: Tensor, bwd) -> None:
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape.ops.append(_TapeOp(name, inputs, output, bwd))
        tape._tracked.add(id(output))


def _need_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op}: expected 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; gradients dA = g @ B^T and dB = A^T @ g."""
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    _record("matmul", (a, b), out, bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    _need_2d(x, "transpose")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    _record("transpose", (x,), out, bwd)
    return out


def _ew(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _ew("add", a, b)
    out = Tensor(a.data + b.data)
    _record("add", (a, b), out, lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _ew("sub", a, b)
    out = Tensor(a.data - b.data)
    _record("sub", (a, b), out, lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _ew("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    _record("mul", (a, b), out, bwd)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    _record("scale", (x,), out, lambda g: (g * c,))
    return out


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1 x n row vector to every row of an m x n matrix."""
    _need_2d(x, "add_rowvec")
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_rowvec: bias shape {b.shape} does not fit {x.shape}")
    out = Tensor(x.data + b.data)

    def bwd(g):
        return g, g.sum(axis=0, keepdims=True)

    _record("add_rowvec", (x, b), out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g):
        return (g * (x.data > 0.0),)

    _record("relu", (x,), out, bwd)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor | None = None, activation: bool = False) -> Tensor:
    """Fused x @ w (+ b per row) (+ ReLU); one tape entry per layer."""
    _need_2d(x, "affine")
    _need_2d(w, "affine")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: inner dims differ, {x.shape} x {w.shape}")
    if b is not None and b.shape != (1, w.shape[1]):
        raise ShapeError(f"affine: bias shape {b.shape} does not fit {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    if activation:
        y = np.maximum(y, 0.0)
    out = Tensor(y)

    if b is None:

        def bwd(g):
            gz = g * (y > 0.0) if activation else g
            return gz @ w.data.T, x.data.T @ gz

        _record("affine", (x, w), out, bwd)
    else:

        def bwd(g):
            gz = g * (y > 0.0) if activation else g
            return gz @ w.data.T, x.data.T @ gz, gz.sum(axis=0, keepdims=True)

        _record("affine", (x, w, b), out, bwd)
    return out


def row_softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; every output row sums to 1."""
    _need_2d(x, "row_softmax")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    _record("row_softmax", (x,), out, bwd)
    return out


def row_sigmoid(x: Tensor) -> Tensor:
    """Element-wise logistic; no normalization across the row."""
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0.0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    _record("row_sigmoid", (x,), out, bwd)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation of matrices with equal row counts."""
    if not parts:
        raise ShapeError("concat_cols: need at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        _need_2d(p, "concat_cols")
        if p.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ, {p.shape[0]} vs {rows}"
            )
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    _record("concat_cols", tuple(parts), out, bwd)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _need_2d(x, "slice_cols")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {x.shape}")
    out = Tensor(x.data[:, start:stop].copy())

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    _record("slice_cols", (x,), out, bwd)
    return out


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows by integer index; backward scatter-adds into the source."""
    _need_2d(x, "gather_rows")
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError(f"gather_rows: bad index for {x.shape[0]} rows")
    out = Tensor(x.data[idx])

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    _record("gather_rows", (x,), out, bwd)
    return out


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Broadcast a 1 x d row to n rows; backward sums over the copies."""
    _need_2d(x, "repeat_rows")
    if x.shape[0] != 1:
        raise ShapeError(f"repeat_rows: expected a single row, got {x.shape}")
    out = Tensor(np.repeat(x.data, n, axis=0))

    def bwd(g):
        return (g.sum(axis=0, keepdims=True),)

    _record("repeat_rows", (x,), out, bwd)
    return out


def spatial_mean(x: Tensor) -> Tensor:
    """Average a d x H x W volume over its spatial axes into a 1 x d row."""
    if x.data.ndim != 3:
        raise ShapeError(f"spatial_mean: expected 3-D tensor, got shape {x.shape}")
    d, h, w = x.shape
    out = Tensor(x.data.mean(axis=(1, 2))[None, :])

    def bwd(g):
        return (np.broadcast_to(g[0][:, None, None] / (h * w), (d, h, w)).copy(),)

    _record("spatial_mean", (x,), out, bwd)
    return out


def neg_pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """S[i, j] = -||a_i - b_j||^2 for rows of two matrices with equal width."""
    _need_2d(a, "neg_pairwise_sqdist")
    _need_2d(b, "neg_pairwise_sqdist")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"neg_pairwise_sqdist: widths differ, {a.shape} vs {b.shape}"
        )
    an = (a.data * a.data).sum(axis=1, keepdims=True)
    bn = (b.data * b.data).sum(axis=1, keepdims=True)
    out = Tensor(-(an + bn.T - 2.0 * (a.data @ b.data.T)))

    def bwd(g):
        da = -2.0 * (g.sum(axis=1, keepdims=True) * a.data - g @ b.data)
        db = -2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return da, db

    _record("neg_pairwise_sqdist", (a, b), out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([[x.data.sum()]]))

    def bwd(g):
        return (np.full_like(x.data, g[0, 0]),)

    _record("sum_all", (x,), out, bwd)
    return out


def softmax_xent_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of softmax cross-entropy against integer labels.

    Fused for numerical stability: forward is logsumexp minus the true-class
    logit, backward is (softmax - onehot) / n_rows.
    """
    _need_2d(logits, "softmax_xent_mean")
    lab = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if lab.shape != (n,):
        raise ShapeError(f"softmax_xent_mean: {lab.shape} labels for {n} rows")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"softmax_xent_mean: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - z[np.arange(n), lab]
    out = Tensor(np.array([[nll.mean()]]))

    def bwd(g):
        p = np.exp(z - lse)
        p[np.arange(n), lab] -= 1.0
        return (p * (g[0, 0] / n),)

    _record("softmax_xent_mean", (logits,), out, bwd)
    return out


def bce_sum(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of two-term binary cross-entropy between probabilities and 0/1 targets.

    Uses the 0 * log(0) = 0 convention so exact hits contribute zero loss.
    """
    m = np.asarray(targets, dtype=np.float64)
    if m.shape != probs.shape:
        raise ShapeError(f"bce_sum: target shape {m.shape} vs probs {probs.shape}")
    p = probs.data
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(m > 0.0, m * np.log(p), 0.0)
        neg = np.where(m < 1.0, (1.0 - m) * np.log1p(-p), 0.0)
    out = Tensor(np.array([[-(pos + neg).sum()]]))

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dp = np.where(m > 0.0, m / p, 0.0)
            dn = np.where(m < 1.0, (1.0 - m) / (1.0 - p), 0.0)
        return ((dn - dp) * g[0, 0],)

    _record("bce_sum", (probs,), out, bwd)
    return out


def one_hot_argmax_rows(x: Tensor) -> Tensor:
    """Row-wise one-hot of the argmax, ties to the lowest index.

    The result is a constant: no gradient flows through this op.
    """
    _need_2d(x, "one_hot_argmax_rows")
    n, c = x.shape
    out = np.zeros((n, c))
    out[np.arange(n), np.argmax(x.data, axis=1)] = 1.0
    return Tensor(out)


def corrupt_grad_identity(x: Tensor, factor: float = 1.5) -> Tensor:
    """Identity in value, scaled in gradient. Negative control only.

    Inserting this into a graph leaves the loss unchanged while making the
    recorded gradient wrong by ``factor``, which a working finite-difference
    check must flag.
    """
    out = Tensor(x.data.copy())
    _record("corrupt_grad_identity", (x,), out, lambda g: (g * factor,))
    return out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_report(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
) -> tuple[float, str]:
    """Compare tape gradients of ``f(params)`` against central differences.

    Returns (max relative error, name of the worst parameter) where the
    relative error of one coordinate is |ad - fd| / max(1, |fd|). ``f`` is
    evaluated twice per coordinate with the parameter perturbed in place.
    """
    if eps <= 0.0:
        raise ValueError("finite_diff_report: eps must be positive")
    for t in params.values():
        if not t.requires_grad:
            raise ValueError("finite_diff_report: all params must require grad")
        t.zero_grad()
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise ValueError("finite_diff_report: non-finite loss")
    tape.backward(loss)

    worst = 0.0
    worst_name = ""
    for name, t in params.items():
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = f(params).item()
            flat[k] = orig - eps
            lo = f(params).item()
            flat[k] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError(f"finite_diff_report: non-finite f at {name}[{k}]")
            fd = (hi - lo) / (2.0 * eps)
            err = abs(gflat[k] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
                worst_name = name
    return worst, worst_name


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences."""
    return finite_diff_report(f, params, eps)[0]
