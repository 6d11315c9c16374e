"""Reverse-mode automatic differentiation on numpy arrays.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are recorded in execution order together with a backward rule.
``Tape.backward(loss)`` then walks the records once, in reverse.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(square(w))
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 4.])

Shapes must match exactly for binary operations; the only broadcasting is
a Python/numpy scalar against a tensor, plus the explicit :func:`bias_add`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_TAPES: list["Tape"] = []


def current_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """An array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record(NamedTuple):
    out: Tensor
    parents: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, parents, backward) -> None:
        out._tape = self
        self.records.append(_Record(out, tuple(parents), backward))

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Populate ``.grad`` of every tensor reachable from ``loss``.

        Tensors in ``params`` that do not influence ``loss`` get zero grads.
        """
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        for rec in self.records:
            rec.out.grad = None
            for p in rec.parents:
                if p.requires_grad:
                    p.grad = None
        for p in params:
            p.grad = None
        if loss._tape is self:
            loss.grad = np.ones_like(loss.data)
            for rec in reversed(self.records):
                g = rec.out.grad
                if g is None:
                    continue
                grads = rec.backward(g)
                for p, gp in zip(rec.parents, grads):
                    if gp is None or not p.requires_grad:
                        continue
                    gp = np.asarray(gp, dtype=p.data.dtype).reshape(p.shape)
                    p.grad = gp if p.grad is None else p.grad + gp
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def record_op(data, parents, backward) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward(grad_out)`` must return one gradient (or None) per parent.
    Nothing is recorded unless a tape is active and some parent requires
    gradients.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return record_op(a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return record_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def _leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, 1.0, slope).astype(x.dtype)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data > 0, x.data, x.data * slope)
    return record_op(out, (x,), lambda g: (g * _leaky_relu_grad(x.data, slope),))


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def absolute(x) -> Tensor:
    # sign(0) == 0 gives the zero subgradient at the kink
    x = as_tensor(x)
    return record_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return record_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return record_op(a.data @ b.data, (a, b),
                     lambda g: (g @ b.data.T, a.data.T @ g))


def bias_add(x, b, axis: int = -1) -> Tensor:
    """Add the vector ``b`` along ``axis`` of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias {b.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return record_op(x.data + b.data.reshape(view), (x, b),
                     lambda g: (g, g.sum(axis=others)))


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record_op(out, (x,), backward)


def reduce_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis), 1.0 / count)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record_op(s, (x,), backward)


# ---------------------------------------------------------------- structural

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return record_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) > 1:
        raise ShapeError("stack: operands differ in shape")
    out = np.stack([t.data for t in tensors], axis=axis)
    return record_op(out, tensors,
                     lambda g: tuple(np.moveaxis(g, axis, 0)))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def take(x, index) -> Tensor:
    """``x[index]``; repeated advanced indices accumulate in the backward pass."""
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record_op(out, (x,), backward)


# ---------------------------------------------------------------- 3D convolution

def _triple(v) -> tuple[int, int, int]:
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def conv_output_extent(n: int, kernel: int, stride: int, padding: int) -> int:
    """Extent of a strided convolution: ``(n + 2p - k) // s + 1``."""
    span = n + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded extent {n + 2 * padding}")
    return span // stride + 1


def transposed_output_extent(n: int, kernel: int, stride: int, padding: int) -> int:
    """Extent of a transposed convolution: ``(n - 1) * s - 2p + k``."""
    out = (n - 1) * stride - 2 * padding + kernel
    if out < 1:
        raise ShapeError(f"transposed conv would produce extent {out}")
    return out


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 5:
        raise ShapeError(f"expected (B, C, D, H, W) or (C, D, H, W), got {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, k: int, s: int, out_ext) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    win = win[:, :, :out_ext[0], :out_ext[1], :out_ext[2]]
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(
        b * out_ext[0] * out_ext[1] * out_ext[2], c * k ** 3)


def _col2im(cols: np.ndarray, padded_shape, k: int, s: int, out_ext) -> np.ndarray:
    b, c = padded_shape[:2]
    do, ho, wo = out_ext
    cols = cols.reshape(b, do, ho, wo, c, k, k, k).transpose(0, 4, 1, 2, 3, 5, 6, 7)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            for m in range(k):
                out[:, :, i:i + s * (do - 1) + 1:s,
                    j:j + s * (ho - 1) + 1:s,
                    m:m + s * (wo - 1) + 1:s] += cols[..., i, j, m]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p, p:-p]


def conv3d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, C_in, D, H, W) with (C_out, C_in, k, k, k)."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    x5, squeeze = _batched(x)
    b, ci = x5.shape[:2]
    co, kci, k = kernels.shape[0], kernels.shape[1], kernels.shape[2]
    if kci != ci or kernels.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d: kernels {kernels.shape} incompatible with input {x.shape}")
    ext = tuple(conv_output_extent(n, k, stride, padding) for n in x5.shape[2:])
    xp = _pad(x5.data, padding)
    cols = _im2col(xp, k, stride, ext)
    kmat = kernels.data.reshape(co, -1)
    out = (cols @ kmat.T).reshape(b, *ext, co).transpose(0, 4, 1, 2, 3)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, co)
        dk = (g2.T @ cols).reshape(kernels.shape)
        dx = _unpad(_col2im(g2 @ kmat, xp.shape, k, stride, ext), padding)
        return dx, dk

    out = record_op(np.ascontiguousarray(out), (x5, kernels), backward)
    return reshape(out, out.shape[1:]) if squeeze else out


def conv3d_transposed(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d`; kernels are (C_in, C_out, k, k, k).

    With the same kernel array, ``<conv3d(u, K), v> == <u, conv3d_transposed(v, K)>``
    whenever the stride divides ``n + 2p - k`` (otherwise the output extent is
    one of several that map back onto ``v`` and trailing voxels are dropped).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    x5, squeeze = _batched(x)
    b, ci = x5.shape[:2]
    kci, co, k = kernels.shape[0], kernels.shape[1], kernels.shape[2]
    if kci != ci or kernels.shape[2:] != (k, k, k):
        raise ShapeError(
            f"conv3d_transposed: kernels {kernels.shape} incompatible with input {x.shape}")
    in_ext = x5.shape[2:]
    out_ext = tuple(transposed_output_extent(n, k, stride, padding) for n in in_ext)
    padded = (b, co) + tuple(n + 2 * padding for n in out_ext)
    xcols = x5.data.transpose(0, 2, 3, 4, 1).reshape(-1, ci)
    kmat = kernels.data.reshape(ci, -1)
    out = _unpad(_col2im(xcols @ kmat, padded, k, stride, in_ext), padding)

    def backward(g):
        gcols = _im2col(_pad(g, padding), k, stride, in_ext)
        dx = (gcols @ kmat.T).reshape(b, *in_ext, ci).transpose(0, 4, 1, 2, 3)
        dk = (xcols.T @ gcols).reshape(kernels.shape)
        return dx, dk

    out = record_op(np.ascontiguousarray(out), (x5, kernels), backward)
    return reshape(out, out.shape[1:]) if squeeze else out


def max_pool3d(x, k: int) -> Tensor:
    """Non-overlapping max pooling with window and stride ``k``.

    Output extent is ``n // k``; trailing voxels that do not fill a window
    are dropped. Ties route the gradient to the first element in window order.
    """
    x = as_tensor(x)
    x5, squeeze = _batched(x)
    b, c, d, h, w = x5.shape
    do, ho, wo = d // k, h // k, w // k
    if min(do, ho, wo) < 1:
        raise ShapeError(f"max_pool3d: window {k} larger than extent {x5.shape[2:]}")
    crop = x5.data[:, :, :do * k, :ho * k, :wo * k]
    win = crop.reshape(b, c, do, k, ho, k, wo, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    win = win.reshape(b, c, do, ho, wo, k ** 3)
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((b, c, do, ho, wo, k ** 3), dtype=g.dtype)
        np.put_along_axis(gwin, arg, g[..., None], axis=-1)
        gwin = gwin.reshape(b, c, do, ho, wo, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        full = np.zeros_like(x5.data)
        full[:, :, :do * k, :ho * k, :wo * k] = gwin.reshape(b, c, do * k, ho * k, wo * k)
        return (full,)

    out = record_op(out, (x5,), backward)
    return reshape(out, out.shape[1:]) if squeeze else out


def batch_norm(x, gamma, beta, mode: str = "train", running_mean=None,
               running_var=None, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    ``mode`` is ``"train"`` (batch statistics, running buffers updated in
    place), ``"eval"`` (running statistics) or ``"frozen"`` (``gamma*x + beta``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},)")
    view = (1, c) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    gm = gamma.data.reshape(view)
    bt = beta.data.reshape(view)

    if mode == "frozen":
        def backward(g):
            return g * gm, (g * x.data).sum(axis=axes), g.sum(axis=axes)
        return record_op(gm * x.data + bt, (x, gamma, beta), backward)

    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.reshape(view) + eps)
        xhat = (x.data - running_mean.reshape(view)) * inv

        def backward(g):
            return g * gm * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)
        return record_op(gm * xhat + bt, (x, gamma, beta), backward)

    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    n = x.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    if running_mean is not None:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
    if running_var is not None:
        unbiased = var.reshape(c) * (n / max(n - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

    def backward(g):
        dxhat = g * gm
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record_op(gm * xhat + bt, (x, gamma, beta), backward)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
