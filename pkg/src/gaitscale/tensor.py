"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the gait models and contrastive losses need are provided.
Every primitive checks its output for NaN/Inf and raises ``NonFiniteError``
naming the op, so a corrupted run stops where the corruption starts.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonCheckablePoint(ValueError):
    """Raised by grad_check when f passes through a tie in a min/max-style op."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _check_finite(arr: np.ndarray, op: str, where: str = "forward") -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{op} {where}: {bad} non-finite value(s)")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array with an optional gradient tape.

    ``kinks`` counts ties encountered in min/max-style ops upstream of this
    value; a nonzero count means the value is not differentiable here.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "kinks", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.kinks = 0
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
        kinks: int = 0,
    ) -> "Tensor":
        """Wrap the result of a primitive and record it on the tape.

        ``backward`` maps the output gradient to one gradient (or None) per
        parent, already reduced to the parent's shape.
        """
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.kinks = kinks + sum(p.kinks for p in parents)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, node.op, "backward")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # release the tape as we go
            node._parents = ()
            node._backward = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise arithmetic --------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return Tensor.from_op(out, (x,), bw, "sqrt")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return Tensor.from_op(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); exact equality with the floor counts as a kink."""
    mask = x.data > floor
    ties = int(np.count_nonzero(x.data == floor))
    out = np.where(mask, x.data, floor).astype(x.dtype, copy=False)
    return Tensor.from_op(out, (x,), lambda g: (g * mask,), "clamp_min", kinks=ties)


# -- reductions --------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean over empty axes of shape {x.shape}")
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), bw, "mean")


def min_lastdim(x: Tensor) -> Tensor:
    """Minimum over the last axis; ties between minimizers count as kinks."""
    if x.shape[-1] == 0:
        raise ShapeError("min over an empty axis")
    idx = np.argmin(x.data, axis=-1)[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)
    ties = int(np.count_nonzero(np.sum(x.data == out, axis=-1) > 1))

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return Tensor.from_op(out[..., 0], (x,), bw, "min", kinks=ties)


# -- linear algebra and shape ops -------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}: {exc}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # weight matrix shared across leading dims: one big GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {x.shape} -> {shape}") from exc
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return Tensor.from_op(out, (x,), lambda g: (np.transpose(g, inv),), "permute")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in xs]}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return Tensor.from_op(out, tuple(xs), bw, "concat")


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor.from_op(np.array(out), (x,), bw, "slice")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (embedding lookup when axis=0)."""
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    if indices.size and (indices.min() < -x.shape[ax] or indices.max() >= x.shape[ax]):
        raise ShapeError(f"take: index out of range for axis of size {x.shape[ax]}")
    out = np.take(x.data, indices, axis=ax)

    def bw(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (gx,)

    return Tensor.from_op(out, (x,), bw, "take")


def take_along(x: Tensor, indices, axis: int = -1) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take_along_axis(x.data, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        # indices along one axis are unique per position for our callers,
        # but accumulate anyway
        ax = axis % x.ndim
        grids = list(np.indices(indices.shape, sparse=True))
        grids[ax] = indices
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return Tensor.from_op(out, (x,), bw, "take_along")


# -- fused neural-net primitives ---------------------------------------------
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), bw, "softmax")


softmax_lastdim = softmax


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """gain * x / sqrt(mean(x**2) + eps) over the last axis."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("rms_norm over a zero-length last dimension")
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match ({d},)")
    if eps < 0:
        raise ValueError("rms_norm eps must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
        xhat = x.data / r
    out = gain.data * xhat

    def bw(g):
        gg = g * gain.data
        gx = (gg - xhat * np.mean(gg * xhat, axis=-1, keepdims=True)) / r if x.requires_grad else None
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        return gx, ggain

    return Tensor.from_op(out, (x, gain), bw, "rms_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x**2) + eps) over the last axis."""
    n = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) + eps)
    out = x.data / n

    def bw(g):
        return ((g - x.data * np.sum(g * x.data, axis=-1, keepdims=True) / (n * n)) / n,)

    return Tensor.from_op(out, (x,), bw, "l2_normalize")


def linear(x: Tensor, w: Tensor, scale: float = 1.0) -> Tensor:
    """x @ w with an optional constant multiplier; no bias."""
    y = matmul(x, w)
    return y if scale == 1.0 else mul(y, scale)


def swiglu_mlp(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """(silu(x @ w_gate) * (x @ w_up)) @ w_down, bias-free."""
    d = x.shape[-1]
    if w_gate.shape[0] != d or w_up.shape != w_gate.shape or w_down.shape != (w_gate.shape[1], d):
        raise ShapeError(
            f"swiglu_mlp: x[...,{d}] with gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}"
        )
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


# -- gradient oracle ---------------------------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-6,
    coords: Iterable[int] | None = None,
    stencil: int = 2,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``coords`` restricts the comparison to flat indices of x (useful for large
    parameter tensors). ``stencil=4`` uses the fourth-order central difference,
    which tolerates a larger eps and so loses less to rounding on tiny
    gradients. Raises NonCheckablePoint if f hits a tie in a min/max
    style op at x, and NonFiniteError if f is non-finite anywhere it is probed.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ShapeError("grad_check needs a scalar-valued f")
    if y.kinks:
        raise NonCheckablePoint(f"f passes through {y.kinks} tie(s) in a min/max-style op")
    y.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.reshape(base.shape)

    if stencil == 2:
        offsets, weights, denom = (1.0, -1.0), (1.0, -1.0), 2.0
    elif stencil == 4:
        offsets, weights, denom = (2.0, 1.0, -1.0, -2.0), (-1.0, 8.0, -8.0, 1.0), 12.0
    else:
        raise ValueError("stencil must be 2 or 4")
    flat_idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in flat_idx:
        acc = 0.0
        for off, w in zip(offsets, weights):
            probe = base.copy()
            probe.flat[i] += off * eps
            v = f(Tensor(probe)).data
            _check_finite(np.asarray(v), "grad_check probe")
            acc += w * float(np.asarray(v).reshape(-1)[0])
        numeric = acc / (denom * eps)
        err = abs(analytic.flat[i] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
