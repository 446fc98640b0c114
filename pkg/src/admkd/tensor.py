"""Dense tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the gradient of its output to the
gradients of its inputs.  ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into ``.grad`` of every tracked node.
Arrays are float32 by default; float64 tensors are supported so that
gradient checks can run in double precision.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

ArrayLike = Union[np.ndarray, float, int, Sequence]

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class ParameterError(ValueError):
    """Raised for invalid scalar op parameters (e.g. non-positive temperature)."""


class BackwardError(RuntimeError):
    """Raised when backward is called on something that is not a tracked scalar."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype.type in _FLOAT_TYPES:
        # numpy scalars (e.g. from reducing a 0-d array) keep their precision
        return np.asarray(data)
    return np.asarray(data, dtype=np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    # ------------------------------------------------------------------
    # basic properties
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    # ------------------------------------------------------------------
    # autodiff
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every tracked node."""
        if not self.requires_grad:
            raise BackwardError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise BackwardError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            # ops never write in place, so storing the reference is safe
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------
    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

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


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    order.reverse()
    return order


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Optional[np.ndarray] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-axis broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b) -> Tuple[Tensor, Tensor]:
    like = a.data if isinstance(a, Tensor) else (b.data if isinstance(b, Tensor) else None)
    a, b = _lift(a, like), _lift(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    x = a.data if floor is None else np.maximum(a.data, floor)

    def backward(g):
        gx = g / x
        if floor is not None:
            gx = np.where(a.data >= floor, gx, 0.0).astype(a.dtype)
        return (gx,)

    return _node(np.log(x), (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# ----------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        return (np.ascontiguousarray(_expand_reduced(g, a.shape, axes, keepdims)),)

    return _node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError(f"mean over empty extent of shape {a.shape}")
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        return (np.ascontiguousarray(_expand_reduced(g, a.shape, axes, keepdims)) / a.dtype.type(count),)

    return _node(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = a.data.transpose(axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _node(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concatenate needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tensors, backward, "concatenate")


class DetachTape:
    """Records the values leaving every ``detach`` call, then replays them.

    Finite-difference checks use this to hold stop-gradient quantities at
    their base-point values, which is what the analytic gradient assumes.
    """

    def __init__(self):
        self.values: list = []
        self.replaying = False
        self.position = 0

    def rewind(self) -> None:
        self.replaying = True
        self.position = 0


_active_tape: Optional[DetachTape] = None


@contextlib.contextmanager
def detach_tape(tape: DetachTape):
    global _active_tape
    prev = _active_tape
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = prev


def detach(a: Tensor) -> Tensor:
    """Same values, no parents, never tracked."""
    tape = _active_tape
    if tape is not None:
        if tape.replaying:
            if tape.position >= len(tape.values):
                raise BackwardError("detach replay ran past the recorded values; is f deterministic?")
            value = tape.values[tape.position]
            tape.position += 1
            if value.shape != a.shape:
                raise BackwardError(f"detach replay shape {value.shape} differs from {a.shape}")
            return Tensor(value)
        tape.values.append(a.data.copy())
    return Tensor(a.data)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def _conv_out(n: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel extent {k} exceeds padded input extent {n + 2 * pad} along {axis}")
    if span % stride:
        raise ShapeError(f"non-integral output extent along {axis}: ({n}+2*{pad}-{k})/{stride}+1")
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    # NHWC padded copy, then one strided gather into (B*Ho*Wo, kh*kw*C)
    b, c, h, w = x.shape
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (b, ho, wo, kh, kw, c), (s0, s1 * stride, s2 * stride, s1, s2, s3))
    return win.reshape(b * ho * wo, kh * kw * c)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of ``x`` (B,C,H,W) with ``k`` (O,C,kh,kw)."""
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    b, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {k.shape}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"invalid stride={stride} / pad={pad}")
    ho = _conv_out(h, kh, stride, pad, "height")
    wo = _conv_out(w, kw, stride, pad, "width")

    cols = _im2col(x.data, kh, kw, stride, pad, ho, wo)
    kmat = k.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = (cols @ kmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gk = None
        if k.requires_grad:
            gk = (cols.T @ g2).T.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
            gk = np.ascontiguousarray(gk)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(b, ho, wo, kh, kw, c)
            dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        return gx, gk

    return _node(out, (x, k), backward, "conv2d")


def gap(x: Tensor) -> Tensor:
    """Global average pooling (B,C,H,W) -> (B,C)."""
    if x.ndim != 4:
        raise ShapeError(f"gap expects a 4-d tensor, got {x.shape}")
    b, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError(f"gap over empty spatial extent {h}x{w}")
    scale = x.dtype.type(1.0 / (h * w))
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)

    return _node(out, (x,), backward, "gap")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    eps: float = 1e-5,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization of (B,C,H,W).

    Uses batch statistics unless ``running_mean``/``running_var`` are given.
    Returns the output plus the (mean, biased variance) that were used.
    """
    axes = (0, 2, 3)
    xd = x.data
    if running_mean is None:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        batch_stats = True
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        batch_stats = False
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if batch_stats:
                m1 = gxhat.mean(axis=axes)
                m2 = (gxhat * xhat).mean(axis=axes)
                gx = (gxhat - m1[None, :, None, None] - xhat * m2[None, :, None, None]) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
            gx = gx.astype(x.dtype, copy=False)
        return gx, ggamma, gbeta

    result = _node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")
    return result, mu, var


# ----------------------------------------------------------------------
# probability helpers


def _check_tau(tau: float) -> None:
    if not (tau > 0) or not math.isfinite(tau):
        raise ParameterError(f"temperature must be positive and finite, got {tau}")


def softmax(z: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax of ``z / tau`` along the last axis (max-subtracted)."""
    _check_tau(tau)
    scaled = z.data / z.dtype.type(tau)
    e = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / z.dtype.type(tau),)

    return _node(out, (z,), backward, "softmax")


def log_softmax(z: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    scaled = z.data / z.dtype.type(tau)
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return ((g - probs * g.sum(axis=-1, keepdims=True)) / z.dtype.type(tau),)

    return _node(out, (z,), backward, "log_softmax")


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    """SHA-256 over raw bytes of the given tensors, in order."""
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
