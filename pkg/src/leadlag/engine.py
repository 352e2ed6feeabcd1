"""Dense float64 arrays with reverse-mode automatic differentiation.

Arrays are immutable once created (gradient accumulators excepted). Operations
executed inside a ``with Tape():`` block are recorded in execution order,
which is already a valid topological order, so the backward pass is a single
reverse sweep over the record. Ops on untracked inputs (no trainable
ancestor, or no active tape) skip recording entirely and cost a plain numpy
call.

Each tape is single-threaded; independent tapes on separate threads do not
share state (the active-tape stack is thread-local).
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# Test hook for negative controls (selfcheck): when set, one VJP (relu's) is
# deliberately corrupted so gradient checks must fail.
_FAULT_INJECTION = False


def set_fault_injection(on: bool) -> None:
    global _FAULT_INJECTION
    _FAULT_INJECTION = bool(on)


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class DiffArray:
    """A dense float64 array, optionally trainable, addressable on a tape."""

    __slots__ = ("values", "grad", "trainable", "tape_id", "name", "_tracked")

    def __init__(self, values, trainable: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.tape_id = -1
        self.name = name
        self._tracked = trainable

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = self.name or ("param" if self.trainable else "array")
        return f"DiffArray({tag}, shape={self.shape})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_array(other))

    def __radd__(self, other):
        return add(_as_array(other), self)

    def __sub__(self, other):
        return sub(self, _as_array(other))

    def __rsub__(self, other):
        return sub(_as_array(other), self)

    def __mul__(self, other):
        return mul(self, _as_array(other))

    def __rmul__(self, other):
        return mul(_as_array(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_array(other))


def _as_array(x) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x)


_id_counter = itertools.count()


class Tape:
    """Ordered record of primitive ops; reverse replay yields exact VJPs."""

    def __init__(self):
        self._ops: list[tuple[DiffArray, tuple[DiffArray, ...], object]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise TapeError("tape stack corrupted")
        return False

    @staticmethod
    def _assign_id(arr: DiffArray) -> int:
        # ids are globally unique so arrays reused across tapes never collide
        if arr.tape_id < 0:
            arr.tape_id = next(_id_counter)
        return arr.tape_id

    def record(self, out: DiffArray, inputs: tuple[DiffArray, ...], vjp) -> None:
        for a in inputs:
            self._assign_id(a)
        self._assign_id(out)
        self._ops.append((out, inputs, vjp))

    def backward(self, loss: DiffArray) -> None:
        """Populate .grad of every trainable ancestor of `loss` with d(loss)/d(param)."""
        if loss.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.tape_id < 0:
            raise TapeError("loss does not lie on this tape")
        adjoint: dict[int, np.ndarray] = {loss.tape_id: np.ones(())}
        trainables: dict[int, DiffArray] = {}
        if loss.trainable:
            trainables[loss.tape_id] = loss
        for out, inputs, vjp in reversed(self._ops):
            g_out = adjoint.get(out.tape_id)
            if g_out is None:
                continue
            for inp, g in zip(inputs, vjp(g_out)):
                if g is None:
                    continue
                prev = adjoint.get(inp.tape_id)
                adjoint[inp.tape_id] = g if prev is None else prev + g
                if inp.trainable:
                    trainables[inp.tape_id] = inp
        for tid, arr in trainables.items():
            g = adjoint[tid]
            arr.grad = np.broadcast_to(g, arr.shape).copy() if g.shape != arr.shape else g


def backward(loss: DiffArray) -> None:
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


def _apply(values: np.ndarray, inputs: tuple[DiffArray, ...], vjp_builder) -> DiffArray:
    out = DiffArray(values)
    tape = active_tape()
    if tape is not None and any(a._tracked for a in inputs):
        out._tracked = True
        tape.record(out, inputs, vjp_builder())
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: DiffArray, b: DiffArray, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_broadcast(a, b, "add")
    v = a.values + b.values

    def vjp():
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _apply(v, (a, b), vjp)


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_broadcast(a, b, "sub")
    v = a.values - b.values

    def vjp():
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _apply(v, (a, b), vjp)


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_broadcast(a, b, "mul")
    v = a.values * b.values
    av, bv = a.values, b.values

    def vjp():
        return lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))

    return _apply(v, (a, b), vjp)


def neg(a: DiffArray) -> DiffArray:
    def vjp():
        return lambda g: (-g,)

    return _apply(-a.values, (a,), vjp)


def exp(a: DiffArray) -> DiffArray:
    v = np.exp(a.values)

    def vjp():
        return lambda g: (g * v,)

    return _apply(v, (a,), vjp)


def tanh(a: DiffArray) -> DiffArray:
    v = np.tanh(a.values)

    def vjp():
        return lambda g: (g * (1.0 - v * v),)

    return _apply(v, (a,), vjp)


def relu(a: DiffArray) -> DiffArray:
    mask = a.values > 0.0
    v = np.where(mask, a.values, 0.0)

    def vjp():
        if _FAULT_INJECTION:
            return lambda g: (g * (mask * 1.01),)
        return lambda g: (g * mask,)

    return _apply(v, (a,), vjp)


def leaky_relu(a: DiffArray, slope: float) -> DiffArray:
    if slope == 0.0:
        return relu(a)
    mask = a.values > 0.0
    v = np.where(mask, a.values, slope * a.values)

    def vjp():
        return lambda g: (g * np.where(mask, 1.0, slope),)

    return _apply(v, (a,), vjp)


# ---------------------------------------------------------------------------
# matrix primitives

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    try:
        v = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError(f"matmul: batch dims do not broadcast for {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def vjp():
        def back(g):
            ga = _unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), a.shape)
            gb = _unbroadcast(np.matmul(av.swapaxes(-1, -2), g), b.shape)
            return ga, gb

        return back

    return _apply(v, (a, b), vjp)


def swap_last2(a: DiffArray) -> DiffArray:
    if a.ndim < 2:
        raise ShapeError(f"swap_last2 requires ndim >= 2, got {a.shape}")

    def vjp():
        return lambda g: (g.swapaxes(-1, -2),)

    return _apply(a.values.swapaxes(-1, -2).copy(), (a,), vjp)


def softmax(a: DiffArray) -> DiffArray:
    """Row-wise softmax over the last axis. Rows sum to 1 and are strictly positive."""
    if a.ndim < 1 or a.shape[-1] == 0:
        raise ShapeError(f"softmax over empty axis, shape {a.shape}")
    x = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(x)
    v = e / e.sum(axis=-1, keepdims=True)

    def vjp():
        def back(g):
            dot = (g * v).sum(axis=-1, keepdims=True)
            return (v * (g - dot),)

        return back

    return _apply(v, (a,), vjp)


def concat_last(parts: list[DiffArray]) -> DiffArray:
    if not parts:
        raise ShapeError("concat_last of zero arrays")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading shapes differ, {parts[0].shape} vs {p.shape}"
            )
    v = np.concatenate([p.values for p in parts], axis=-1)
    sizes = [p.shape[-1] for p in parts]

    def vjp():
        def back(g):
            splits = np.cumsum(sizes)[:-1]
            return tuple(np.split(g, splits, axis=-1))

        return back

    return _apply(v, tuple(parts), vjp)


def reshape(a: DiffArray, shape) -> DiffArray:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def vjp():
        return lambda g: (g.reshape(old),)

    return _apply(a.values.reshape(shape), (a,), vjp)


def mean(a: DiffArray, axis: int | None = None) -> DiffArray:
    if axis is None:
        n = a.size
        v = a.values.mean()

        def vjp():
            return lambda g: (np.full(a.shape, float(g) / n),)

        return _apply(np.asarray(v), (a,), vjp)
    n = a.shape[axis]
    v = a.values.mean(axis=axis)
    ax = axis

    def vjp():
        return lambda g: (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),)

    return _apply(v, (a,), vjp)


def asum(a: DiffArray, axis: int | None = None) -> DiffArray:
    if axis is None:
        def vjp():
            return lambda g: (np.full(a.shape, float(g)),)

        return _apply(np.asarray(a.values.sum()), (a,), vjp)
    n = a.shape[axis]
    ax = axis

    def vjp():
        return lambda g: (np.repeat(np.expand_dims(g, ax), n, axis=ax),)

    return _apply(a.values.sum(axis=axis), (a,), vjp)


# ---------------------------------------------------------------------------
# gather / scatter primitives (sparse graph contractions run on these)

def _scatter_axis(vals: np.ndarray, idx: np.ndarray, size: int, axis: int) -> np.ndarray:
    """out[..., t, ...] = sum of vals[..., e, ...] over e with idx[e] == t.

    Deterministic: contributions are summed in sorted-index order via reduceat.
    """
    moved = np.moveaxis(vals, axis, 0)
    out = np.zeros((size,) + moved.shape[1:])
    if idx.size == 0:
        return np.moveaxis(out, 0, axis)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    sums = np.add.reduceat(moved[order], starts, axis=0)
    out[sorted_idx[starts]] = sums
    return np.moveaxis(out, 0, axis)


def _check_index(idx: np.ndarray, bound: int, opname: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"{opname}: index must be a 1-d integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise ShapeError(f"{opname}: index out of range [0, {bound})")
    return idx


def gather_rows(a: DiffArray, idx) -> DiffArray:
    """out[..., e, :] = a[..., idx[e], :] (gather along axis -2)."""
    if a.ndim < 2:
        raise ShapeError(f"gather_rows requires ndim >= 2, got {a.shape}")
    idx = _check_index(idx, a.shape[-2], "gather_rows")
    v = np.take(a.values, idx, axis=-2)
    n = a.shape[-2]

    def vjp():
        return lambda g: (_scatter_axis(g, idx, n, axis=-2),)

    return _apply(v, (a,), vjp)


def take_last(a: DiffArray, idx) -> DiffArray:
    """out[..., e] = a[..., idx[e]] (gather along the last axis)."""
    idx = _check_index(idx, a.shape[-1], "take_last")
    v = np.take(a.values, idx, axis=-1)
    n = a.shape[-1]

    def vjp():
        return lambda g: (_scatter_axis(g, idx, n, axis=-1),)

    return _apply(v, (a,), vjp)


def segment_sum(a: DiffArray, idx, num_segments: int) -> DiffArray:
    """out[..., t, :] = sum over entries e with idx[e] == t of a[..., e, :]."""
    if a.ndim < 2:
        raise ShapeError(f"segment_sum requires ndim >= 2, got {a.shape}")
    idx = _check_index(idx, 10**18, "segment_sum")
    if idx.size != a.shape[-2]:
        raise ShapeError(
            f"segment_sum: index length {idx.size} != entries {a.shape[-2]}"
        )
    if idx.size and idx.max() >= num_segments:
        raise ShapeError(f"segment_sum: segment id {int(idx.max())} >= {num_segments}")
    v = _scatter_axis(a.values, idx, num_segments, axis=-2)

    def vjp():
        return lambda g: (np.take(g, idx, axis=-2),)

    return _apply(v, (a,), vjp)


# ---------------------------------------------------------------------------
# activations by name

ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "identity": lambda a: a,
}


def activation_fn(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_checked: int
    n_kinks_skipped: int


@dataclass
class GradCheckReport:
    tol: float
    step: float
    loss_finite: bool
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.loss_finite and all(p.max_rel_err <= self.tol for p in self.params)

    def summary(self) -> str:
        lines = [f"grad check: step={self.step:g} tol={self.tol:g} "
                 f"loss_finite={self.loss_finite}"]
        for p in self.params:
            status = "ok" if p.max_rel_err <= self.tol else "FAIL"
            lines.append(
                f"  {p.name:<28s} max_rel={p.max_rel_err:.3e} "
                f"kinks_skipped={p.n_kinks_skipped} [{status}]"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def grad_check(f, params, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar f() against central finite differences.

    `params` is a list of (name, DiffArray) pairs; f() must be deterministic
    given the current parameter values. Entries probed across a hard kink
    (one-sided slopes disagree grossly) are flagged and skipped, not failed.
    Non-finite losses are reported in the result, not raised.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    params = list(params)
    report = GradCheckReport(tol=tol, step=step, loss_finite=True)
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.values):
            report.loss_finite = False
            return report
        f0 = float(loss.values)
        tape.backward(loss)
    analytic = {}
    for name, p in params:
        analytic[name] = np.zeros(p.shape) if p.grad is None else p.grad.copy()

    atol = 1e-9 * max(1.0, abs(f0))
    for name, p in params:
        a = analytic[name].ravel()
        p.values = np.ascontiguousarray(p.values)
        flat = p.values.reshape(-1)
        max_rel = 0.0
        kinks = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().values)
            flat[i] = orig - step
            fm = float(f().values)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.loss_finite = False
                continue
            slope_f = (fp - f0) / step
            slope_b = (f0 - fm) / step
            if abs(slope_f - slope_b) > 0.1 * max(abs(slope_f), abs(slope_b), 1.0):
                kinks += 1
                continue
            numeric = (fp - fm) / (2.0 * step)
            diff = abs(a[i] - numeric)
            if diff > atol:
                rel = diff / max(abs(a[i]), abs(numeric))
                max_rel = max(max_rel, rel)
        report.params.append(ParamCheck(name, max_rel, flat.size, kinks))
    return report


# ---------------------------------------------------------------------------
# parameter init and optimizer

def uniform_param(rng: np.random.Generator, shape, fan_in: int, name: str) -> DiffArray:
    """Trainable array with entries uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return DiffArray(rng.uniform(-bound, bound, size=shape), trainable=True, name=name)


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = [p for _, p in params] if params and isinstance(params[0], tuple) \
            else list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
