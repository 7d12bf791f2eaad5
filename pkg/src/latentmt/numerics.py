"""Differentiable-computation kernel.

Dense tensors backed by numpy arrays, a tape for exact reverse-mode
gradients, a finite-difference gradient checker, the Adam optimizer and a
plateau learning-rate scheduler. Every forward value and every gradient is
checked for finiteness; NaN/Inf anywhere is a hard error.

Precision: float32 by default (training), float64 via `default_dtype` for
gradient-check tests.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient came out NaN or Inf."""


_state = threading.local()

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, op: str, what: str = "output") -> None:
    # a finite sum implies all entries finite at the magnitudes this kernel
    # sees (inf - inf yields nan, and nan propagates), and is much cheaper
    # than isfinite over the array
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite {what} in op '{op}'")


class Tensor:
    """Dense row-major tensor of real scalars.

    `requires_grad` marks leaves whose gradients the tape should collect.
    Tensors produced by ops inherit requires_grad from their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the taped primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


@dataclass
class OpRecord:
    name: str
    inputs: tuple
    outputs: tuple
    backward: object  # callable: tuple of output grads -> tuple of input grads


class Tape:
    """Ordered record of executed primitives for one backward pass.

    Ops append themselves in execution order, which is automatically a
    topological order; `backward` walks it once in reverse. Gradient
    accumulation follows tape order, so runs are bitwise reproducible.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns gradients for every requires_grad leaf reached, and also
        accumulates them into each leaf's `.grad`.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for rec in reversed(self.records):
            out_grads = tuple(grads.pop(id(o), None) for o in rec.outputs)
            if all(g is None for g in out_grads):
                continue
            out_grads = tuple(
                g if g is not None else np.zeros_like(o.data)
                for g, o in zip(out_grads, rec.outputs)
            )
            in_grads = rec.backward(out_grads)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                _check_finite(g, rec.name, "gradient")
                if inp._is_leaf:
                    if inp in leaf_grads:
                        leaf_grads[inp] = leaf_grads[inp] + g
                    else:
                        leaf_grads[inp] = g
                else:
                    key = id(inp)
                    grads[key] = grads[key] + g if key in grads else g
        for t, g in leaf_grads.items():
            t.grad = g.copy() if t.grad is None else t.grad + g
        return leaf_grads


def _record(name, inputs, outputs, backward) -> None:
    tape = active_tape()
    if tape is None:
        return
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return
    for o in outputs:
        o._is_leaf = False
    tape.records.append(OpRecord(name, tuple(inputs), tuple(outputs), backward))


def _out(data: np.ndarray, inputs, name: str) -> Tensor:
    _check_finite(data, name)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    t.grad = None
    t._is_leaf = True
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = _out(data, (a, b), "add")

    def bw(gs):
        (g,) = gs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    _record("add", (a, b), (out,), bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = _out(data, (a, b), "mul")
    a_data, b_data = a.data, b.data

    def bw(gs):
        (g,) = gs
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    _record("mul", (a, b), (out,), bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast")
    out = _out(data, (a, b), "matmul")
    a_data, b_data = a.data, b.data

    def bw(gs):
        (g,) = gs
        ga = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b.shape)
        return ga, gb

    _record("matmul", (a, b), (out,), bw)
    return out


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not conform along axis {axis}")
    out = _out(data, tensors, "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(gs):
        (g,) = gs
        return tuple(np.split(g, splits, axis=axis))

    _record("concat", tuple(tensors), (out,), bw)
    return out


def split(t: Tensor, sizes: list[int], axis: int = -1) -> tuple[Tensor, ...]:
    t = _as_tensor(t)
    if sum(sizes) != t.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not sum to extent {t.shape[axis]} of {t.shape}")
    splits = np.cumsum(sizes)[:-1]
    parts = np.split(t.data, splits, axis=axis)
    outs = tuple(_out(p, (t,), "split") for p in parts)

    def bw(gs):
        return (np.concatenate(gs, axis=axis),)

    _record("split", (t,), outs, bw)
    return outs


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)
    out = _out(data, tensors, "stack")

    def bw(gs):
        (g,) = gs
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    _record("stack", tuple(tensors), (out,), bw)
    return out


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    t = _as_tensor(t)
    try:
        data = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {t.shape} as {shape}")
    out = _out(data, (t,), "reshape")
    in_shape = t.shape

    def bw(gs):
        (g,) = gs
        return (g.reshape(in_shape),)

    _record("reshape", (t,), (out,), bw)
    return out


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    t = _as_tensor(t)
    if t.data.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2-D, got {t.shape}")
    out = _out(np.swapaxes(t.data, -1, -2), (t,), "transpose")

    def bw(gs):
        (g,) = gs
        return (np.swapaxes(g, -1, -2),)

    _record("transpose", (t,), (out,), bw)
    return out


def tanh(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    data = np.tanh(t.data)
    out = _out(data, (t,), "tanh")

    def bw(gs):
        (g,) = gs
        return (g * (1.0 - data * data),)

    _record("tanh", (t,), (out,), bw)
    return out


def sigmoid(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    x = t.data
    e = np.exp(-np.abs(x))
    denom = 1.0 + e
    data = np.where(x >= 0, 1.0 / denom, e / denom)
    out = _out(data, (t,), "sigmoid")

    def bw(gs):
        (g,) = gs
        return (g * data * (1.0 - data),)

    _record("sigmoid", (t,), (out,), bw)
    return out


def exp(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    with np.errstate(over="ignore"):
        data = np.exp(t.data)
    out = _out(data, (t,), "exp")

    def bw(gs):
        (g,) = gs
        return (g * data,)

    _record("exp", (t,), (out,), bw)
    return out


def log(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(t.data)
    out = _out(data, (t,), "log")
    x = t.data

    def bw(gs):
        (g,) = gs
        return (g / x,)

    _record("log", (t,), (out,), bw)
    return out


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    t = _as_tensor(t)
    data = np.clip(t.data, lo, hi)
    out = _out(data, (t,), "clamp")
    inside = (t.data >= lo) & (t.data <= hi)

    def bw(gs):
        (g,) = gs
        return (g * inside,)

    _record("clamp", (t,), (out,), bw)
    return out


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    t = _as_tensor(t)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    out = _out(data, (t,), "softmax")

    def bw(gs):
        (g,) = gs
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    _record("softmax", (t,), (out,), bw)
    return out


def log_softmax(t: Tensor) -> Tensor:
    """log(softmax) over the last axis, stable for large logit spreads."""
    t = _as_tensor(t)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    out = _out(data, (t,), "log_softmax")
    sm = np.exp(data)

    def bw(gs):
        (g,) = gs
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    _record("log_softmax", (t,), (out,), bw)
    return out


def mean(t: Tensor, axis: int) -> Tensor:
    t = _as_tensor(t)
    if not -t.data.ndim <= axis < t.data.ndim:
        raise ShapeError(f"mean: axis {axis} invalid for shape {t.shape}")
    data = t.data.mean(axis=axis)
    out = _out(data, (t,), "mean")
    n = t.shape[axis]
    in_shape = t.shape

    def bw(gs):
        (g,) = gs
        g = np.expand_dims(g, axis=axis) / n
        return (np.broadcast_to(g, in_shape).copy(),)

    _record("mean", (t,), (out,), bw)
    return out


def tensor_sum(t: Tensor, axis: int | None = None) -> Tensor:
    t = _as_tensor(t)
    if axis is not None and not -t.data.ndim <= axis < t.data.ndim:
        raise ShapeError(f"sum: axis {axis} invalid for shape {t.shape}")
    data = t.data.sum(axis=axis)
    out = _out(np.asarray(data, dtype=t.dtype), (t,), "sum")
    in_shape = t.shape

    def bw(gs):
        (g,) = gs
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    _record("sum", (t,), (out,), bw)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape index the first axis of `table`."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}), got min {ids.min()} max {ids.max()}"
        )
    data = table.data[ids]
    out = _out(data.copy(), (table,), "embedding")
    tab_shape = table.shape

    def bw(gs):
        (g,) = gs
        gt = np.zeros(tab_shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tab_shape[-1]))
        return (gt,)

    _record("embedding", (table,), (out,), bw)
    return out


def masked_fill(t: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is true with `value` (no gradient there)."""
    t = _as_tensor(t)
    mask = np.asarray(mask, dtype=bool)
    try:
        data = np.where(mask, np.asarray(value, dtype=t.dtype), t.data)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {t.shape}")
    out = _out(data, (t,), "masked_fill")

    def bw(gs):
        (g,) = gs
        return (_unbroadcast(np.where(mask, 0.0, g), t.shape).astype(g.dtype),)

    _record("masked_fill", (t,), (out,), bw)
    return out


def gather_last(t: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    t = _as_tensor(t)
    idx = np.asarray(idx)
    if idx.shape != t.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs tensor {t.shape}")
    data = np.take_along_axis(t.data, idx[..., None], axis=-1)[..., 0]
    out = _out(data.copy(), (t,), "gather_last")
    in_shape = t.shape

    def bw(gs):
        (g,) = gs
        gt = np.zeros(in_shape, dtype=g.dtype)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        return (gt,)

    _record("gather_last", (t,), (out,), bw)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps the tensor to a scalar Tensor and must be deterministic
    (freeze any noise before calling). Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    """
    if h <= 0:
        raise ValueError("grad_check: step size must be positive")
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        grads = tape.backward(y)
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        if not np.isfinite(fp) or not np.isfinite(fm):
            raise NonFiniteError(f"grad_check: non-finite function value at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(a - numeric) / denom))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter Adam moments plus step counter and hyperparameters."""

    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam update with bias correction; parameters mutate in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"optimizer_step: grad {g.shape} vs param {p.data.shape} for '{name}'")
        _check_finite(g, "optimizer_step", f"gradient of '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data[...] = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        _check_finite(p.data, "optimizer_step", f"updated '{name}'")


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most `max_norm`."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


@dataclass
class PlateauScheduler:
    """Halve the learning rate when the monitored metric stops improving.

    Lower metric is better. A decay fires only after `patience` consecutive
    epochs without improvement; the rate never goes below `min_lr` and
    never increases.
    """

    lr: float
    patience: int = 1
    factor: float = 0.5
    min_lr: float = 1e-5
    best: float | None = None
    bad_epochs: int = 0
    history: list = field(default_factory=list)

    def step(self, metric: float) -> float:
        self.history.append(float(metric))
        if self.best is None or metric < self.best:
            self.best = float(metric)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr
