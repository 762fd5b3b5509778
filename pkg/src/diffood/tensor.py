"""Dense tensors with reverse-mode automatic differentiation.

Every op records a backward closure on its output when any input requires
grad. ``backward`` walks the graph in reverse topological order and
accumulates into ``.grad`` of leaves; call ``zero_grad`` (or
``Tensor.zero_grad``) between passes when accumulation is not wanted.

Values default to float32. Gradient checks switch to float64 with the
``precision`` context manager.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _copy: bool = True):
        arr = np.array(data, dtype=_DTYPE, copy=True) if _copy else data
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -------------------------------------------------------------- operators
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_not_scalar(shape):
    raise ValueError(f"expected a scalar tensor, got shape {tuple(shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data.astype(_DTYPE, copy=False) if data.dtype != _DTYPE else data
    out.grad = None
    out.op = op
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# Gradients of interior nodes during a backward pass, keyed by id().
_PENDING: dict[int, np.ndarray] = {}


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t._backward is not None:
        prev = _PENDING.get(id(t))
        _PENDING[id(t)] = np.asarray(g, dtype=t.data.dtype) if prev is None else prev + g
    elif t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _acc(a, g * b.data)
        if b.requires_grad:
            _acc(b, g * a.data)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)

    def bw(g):
        if a.requires_grad:
            _acc(a, g / b.data)
        if b.requires_grad:
            _acc(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), bw, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: _acc(a, g * out), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: _acc(a, g / a.data), "log")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    u = c * (x + 0.044715 * (x * x * x))
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        du = c * (1.0 + 3 * 0.044715 * x * x)
        _acc(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du))

    return _result(out, (a,), bw, "gelu")


# ------------------------------------------------------------------- linalg
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        if a.requires_grad:
            _acc(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                _acc(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _acc(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), bw, "matmul")


# --------------------------------------------------------------- reductions
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(out, dtype=_DTYPE), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g / count, a.shape))

    return _result(np.asarray(out, dtype=_DTYPE), (a,), bw, "mean")


# ---------------------------------------------------------------- reshaping
def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: _acc(a, g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, tuple(axes))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: _acc(a, np.transpose(g, inv)), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def slice0(a: Tensor, lo: int, hi: int) -> Tensor:
    """``a[lo:hi]`` along the first axis."""
    if not 0 <= lo < hi <= a.shape[0]:
        raise ShapeError("slice", a.shape, (lo, hi))

    def bw(g):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        _acc(a, full)

    return _result(a.data[lo:hi], (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _acc(t, piece)

    return _result(out, tensors, bw, "concat")


# ------------------------------------------------------------ nn primitives
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        _acc(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).sum(axis=red))
        if beta.requires_grad:
            _acc(beta, g.sum(axis=red))
        if a.requires_grad:
            gx = g * gamma.data
            d = x.shape[-1]
            _acc(a, rstd / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return _result(out, (a, gamma, beta), bw, "layer_norm")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _acc(weight, gw)

    return _result(out, (weight,), bw, "embedding")


def _weights(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != tuple(shape):
        raise ShapeError("mask", m.shape, shape)
    return m


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean over unmasked positions of the per-coordinate squared error.

    ``mask`` covers every axis but the last. The result is a scalar.
    """
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    w = _weights(mask, pred.shape[:-1])
    denom = w.sum() * pred.shape[-1]
    if denom == 0:
        raise ValueError("mse: every position is masked")
    diff = pred.data.astype(np.float64) - target.data
    out = np.asarray((w[..., None] * diff * diff).sum() / denom)

    def bw(g):
        gd = (2.0 * float(g) / denom) * w[..., None] * diff
        _acc(pred, gd)
        _acc(target, -gd)

    return _result(out, (pred, target), bw, "mse")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over unmasked positions of -log softmax(logits)[target].

    ``logits`` has classes on the last axis; ``targets`` and ``mask`` cover
    the remaining axes.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise IndexError("cross_entropy: target out of range")
    w = _weights(mask, targets.shape)
    denom = w.sum()
    if denom == 0:
        raise ValueError("cross_entropy: every position is masked")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0] - np.log(se[..., 0])
    out = np.asarray(-(w * picked).sum() / denom)

    def bw(g):
        p = e / se.astype(e.dtype)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        _acc(logits, p * ((float(g) / denom) * w[..., None]).astype(p.dtype))

    return _result(out, (logits,), bw, "cross_entropy")


# ------------------------------------------------------------------ backward
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad.

    Leaf grads accumulate across calls until reset with ``zero_grad``.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    if loss._backward is None:
        _acc(loss, np.asarray(grad, dtype=loss.data.dtype))
        return
    order = _topo(loss)
    _PENDING.clear()
    _PENDING[id(loss)] = np.asarray(grad, dtype=loss.data.dtype)
    try:
        for node in reversed(order):
            g = _PENDING.pop(id(node), None)
            if g is not None and node._backward is not None:
                node._backward(g)
    finally:
        _PENDING.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------- adam
@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float | None = None) -> AdamState:
    """Apply one bias-corrected Adam update in place and return ``state``."""
    if len(params) != len(grads):
        raise ShapeError("adam_step", (len(params),), (len(grads),))
    if not state.m:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
    lr = state.lr if lr is None else lr
    state.step_count += 1
    k = state.step_count
    c1 = 1.0 - state.beta1**k
    c2 = 1.0 - state.beta2**k
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(np.float64)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.data.dtype)
    return state


# -------------------------------------------------------- gradient checking
def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` maps the tensor to a scalar tensor. ``x.data`` is perturbed in place
    and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    loss = f(x)
    backward(loss)
    analytic = x.grad.astype(np.float64).copy()
    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("finite_diff_check: non-finite function value")
            numeric[i] = (fp - fm) / (2 * h)
    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(np.abs(a), 1e-8)
    return float(err.max()) if err.size else 0.0
