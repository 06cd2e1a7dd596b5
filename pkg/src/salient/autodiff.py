"""Reverse-mode automatic differentiation over dense numpy tensors.

A Tape records every produced value in creation order, which is already a
topological order, so the backward sweep is one reversed pass. Gradients
from fan-out are accumulated in fixed tape order: the same graph on the
same inputs yields bit-identical gradients.

Training runs in float32; construct a Tape with dtype=np.float64 for
verification work (finite-difference checks need the headroom). Non-finite
values raise immediately unless check_finite is turned off.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    DetachedGraph,
    InvalidStep,
    NonFiniteValue,
    NotScalar,
    ShapeMismatch,
)


class Tensor:
    """Immutable handle to one tape entry. Do not mutate .data."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: "Tape", idx: int, data: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary ops --------------------------------------------------------
    def sigmoid(self) -> "Tensor":
        s = expit(self.data)
        idx = self.idx

        def bwd(g, acc):
            _acc(acc, idx, g * (s * (1.0 - s)))

        return self.tape._record(s, "sigmoid", (idx,), bwd)

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        idx = self.idx

        def bwd(g, acc):
            _acc(acc, idx, g * (1.0 - t * t))

        return self.tape._record(t, "tanh", (idx,), bwd)

    def square(self) -> "Tensor":
        x = self.data
        idx = self.idx

        def bwd(g, acc):
            _acc(acc, idx, 2.0 * g * x)

        return self.tape._record(x * x, "square", (idx,), bwd)

    def sum(self) -> "Tensor":
        idx = self.idx
        shp = self.shape

        def bwd(g, acc):
            _acc(acc, idx, np.broadcast_to(g, shp))

        return self.tape._record(np.sum(self.data), "sum", (idx,), bwd)

    def mean(self) -> "Tensor":
        idx = self.idx
        shp = self.shape
        n = self.size

        def bwd(g, acc):
            _acc(acc, idx, np.broadcast_to(g / n, shp))

        return self.tape._record(np.mean(self.data), "mean", (idx,), bwd)

    def sqnorm(self) -> "Tensor":
        """Sum of squared entries, as a scalar."""
        x = self.data
        idx = self.idx

        def bwd(g, acc):
            _acc(acc, idx, (2.0 * g) * x)

        return self.tape._record(np.sum(x * x), "sqnorm", (idx,), bwd)


class Tape:
    """Single-threaded op recorder. One tape per forward/backward pass."""

    def __init__(self, dtype=np.float32, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._ops: list[tuple[str, tuple[int, ...], Callable | None]] = []
        self._needs: list[bool] = []

    def __len__(self) -> int:
        return len(self._ops)

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        """Register an input. No copy is made when dtype already matches,
        so parameter arrays are shared, not forked."""
        arr = np.asarray(data, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteValue("non-finite leaf value")
        self._ops.append(("leaf", (), None))
        self._needs.append(bool(requires_grad))
        return Tensor(self, len(self._ops) - 1, arr)

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def _record(self, data, name, inputs: tuple, bwd) -> Tensor:
        data = np.asarray(data, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteValue(f"non-finite value produced by op '{name}'")
        needs = any(self._needs[i] for i in inputs)
        self._ops.append((name, inputs, bwd if needs else None))
        self._needs.append(needs)
        return Tensor(self, len(self._ops) - 1, data)


class Gradients:
    """Result of a backward pass; query with .wrt(tensor)."""

    __slots__ = ("_tape", "_grads")

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def wrt(self, t: Tensor):
        """Gradient array for `t`, or None if no path reached it."""
        if t.tape is not self._tape:
            raise DetachedGraph("tensor does not belong to the differentiated tape")
        return self._grads[t.idx]


def _acc(acc: list, idx: int, val: np.ndarray) -> None:
    g = acc[idx]
    acc[idx] = val if g is None else g + val


def _check_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise DetachedGraph("operands recorded on different tapes")
    return tape


def backward(loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar; returns exact reverse-mode gradients."""
    tape = loss.tape
    if loss.data.shape != ():
        raise NotScalar(f"backward needs a scalar, got shape {loss.data.shape}")
    grads: list = [None] * len(tape._ops)
    grads[loss.idx] = np.ones((), dtype=tape.dtype)
    for idx in range(loss.idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        _, _, bwd = tape._ops[idx]
        if bwd is not None:
            bwd(g, grads)
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# binary / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _check_tape(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    ia, ib = a.idx, b.idx

    def bwd(g, acc):
        _acc(acc, ia, g)
        _acc(acc, ib, g)

    return tape._record(a.data + b.data, "add", (ia, ib), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _check_tape(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    ia, ib = a.idx, b.idx

    def bwd(g, acc):
        _acc(acc, ia, g)
        _acc(acc, ib, -g)

    return tape._record(a.data - b.data, "sub", (ia, ib), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _check_tape(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    ia, ib = a.idx, b.idx
    da, db = a.data, b.data

    def bwd(g, acc):
        _acc(acc, ia, g * db)
        _acc(acc, ib, g * da)

    return tape._record(da * db, "mul", (ia, ib), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _check_tape(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ia, ib = a.idx, b.idx
    da, db = a.data, b.data

    def bwd(g, acc):
        _acc(acc, ia, g @ db.T)
        _acc(acc, ib, da.T @ g)

    return tape._record(da @ db, "matmul", (ia, ib), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose: rank-2 only, got {a.shape}")
    ia = a.idx

    def bwd(g, acc):
        _acc(acc, ia, g.T)

    return a.tape._record(np.ascontiguousarray(a.data.T), "transpose", (ia,), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis (broadcast over leading axes)."""
    tape = _check_tape(x, b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"bias_add: {x.shape} + {b.shape}")
    ix, ib = x.idx, b.idx
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g, acc):
        _acc(acc, ix, g)
        _acc(acc, ib, g.sum(axis=lead) if lead else g)

    return tape._record(x.data + b.data, "bias_add", (ix, ib), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat: empty input list")
    tape = _check_tape(*parts)
    idxs = tuple(p.idx for p in parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, acc):
        for k, idx in enumerate(idxs):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[k], offsets[k + 1])
            _acc(acc, idx, g[tuple(sl)])

    out = np.concatenate([p.data for p in parts], axis=axis)
    return tape._record(out, "concat", idxs, bwd)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= axis < x.data.ndim):
        raise ShapeMismatch(f"slice: axis {axis} out of range for {x.shape}")
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeMismatch(f"slice: [{start}:{stop}] out of range on axis {axis} of {x.shape}")
    ix = x.idx
    shp = x.shape
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g, acc):
        full = np.zeros(shp, dtype=g.dtype)
        full[sl] = g
        _acc(acc, ix, full)

    return x.tape._record(np.ascontiguousarray(x.data[sl]), "slice", (ix,), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    ix = x.idx
    c = float(c)

    def bwd(g, acc):
        _acc(acc, ix, c * g)

    return x.tape._record(c * x.data, "scale", (ix,), bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    ix = x.idx

    def bwd(g, acc):
        _acc(acc, ix, g)

    return x.tape._record(x.data + float(c), "add_scalar", (ix,), bwd)


def recip(x: Tensor) -> Tensor:
    """Elementwise 1/x. A zero input surfaces as NonFiniteValue."""
    ix = x.idx
    with np.errstate(divide="ignore"):
        out = 1.0 / x.data

    def bwd(g, acc):
        _acc(acc, ix, -g * out * out)

    return x.tape._record(out, "recip", (ix,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}")
    ix = x.idx
    old = x.shape

    def bwd(g, acc):
        _acc(acc, ix, g.reshape(old))

    return x.tape._record(x.data.reshape(shape), "reshape", (ix,), bwd)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(f, point, h: float, coords=None) -> float:
    """Compare reverse-mode gradients of f against central differences.

    `f(tape, x)` must return a scalar Tensor built from the leaf `x`.
    Runs in float64. Returns the max over checked coordinates of
    |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|). `coords` restricts the
    check to a subset of flat indices (full scan by default).
    """
    if not (h > 0):
        raise InvalidStep(f"step size must be positive, got {h}")
    base = np.array(point, dtype=np.float64)

    tape = Tape(dtype=np.float64)
    x = tape.leaf(base.copy())
    out = f(tape, x)
    if out.data.shape != ():
        raise NotScalar("grad_check target must be scalar-valued")
    g = backward(out).wrt(x)
    g_ad = np.zeros_like(base) if g is None else np.asarray(g)

    def eval_at(vec):
        t = Tape(dtype=np.float64)
        return float(f(t, t.leaf(vec)).data)

    flat = base.ravel()
    ad = g_ad.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = eval_at(base)
        flat[i] = orig - h
        fm = eval_at(base)
        flat[i] = orig
        g_fd = (fp - fm) / (2.0 * h)
        err = abs(ad[i] - g_fd) / max(1e-12, abs(ad[i]) + abs(g_fd))
        worst = max(worst, err)
    return worst


def directional_grad_check(f, point, h: float, n_dirs: int = 16, rng=None) -> float:
    """Compare AD directional derivatives g.d against central differences of
    f along random unit directions d.

    One direction exercises every coordinate of the gradient at once, and the
    directional derivative has the magnitude of the full gradient, so the
    comparison stays far above the finite-difference noise floor even where
    individual coordinates are tiny. Returns the max relative error.
    """
    if not (h > 0):
        raise InvalidStep(f"step size must be positive, got {h}")
    if rng is None:
        rng = np.random.default_rng(0)
    base = np.array(point, dtype=np.float64)

    tape = Tape(dtype=np.float64)
    x = tape.leaf(base.copy())
    out = f(tape, x)
    if out.data.shape != ():
        raise NotScalar("grad_check target must be scalar-valued")
    g = backward(out).wrt(x)
    g_ad = np.zeros_like(base) if g is None else np.asarray(g)

    def eval_at(vec):
        t = Tape(dtype=np.float64)
        return float(f(t, t.leaf(vec)).data)

    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(base.shape)
        d /= np.linalg.norm(d)
        fp = eval_at(base + h * d)
        fm = eval_at(base - h * d)
        g_fd = (fp - fm) / (2.0 * h)
        g_dir = float(np.sum(g_ad * d))
        err = abs(g_dir - g_fd) / max(1e-12, abs(g_dir) + abs(g_fd))
        worst = max(worst, err)
    return worst
