"""Reverse-mode tensor core on dense numpy arrays.

A Tensor wraps a float array plus an optional backward closure recorded at
construction time. Every operation that sees at least one gradient-requiring
input appends itself to the implicit tape (the DAG of ``_parents`` links with
a monotonically increasing creation index), so ``backward()`` can replay the
recorded closures exactly once in reverse creation order. Gradients
accumulate with ``+=`` so a tensor consumed twice receives both
contributions.

Storage is float32 by default; float64 arrays are kept as float64 so checks
can run the whole graph in double precision. Reductions always accumulate in
float64 regardless of storage dtype. Non-finite values are a contract
violation and raise as soon as they would be stored.
"""

from __future__ import annotations

import itertools

import numpy as np

DEFAULT_DTYPE = np.float32

_SEQ = itertools.count()


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class FinitenessError(ArithmeticError):
    """A NaN or Inf was about to enter a tensor."""


def _coerce(data) -> np.ndarray:
    # Only explicit float64 values keep double width (numpy hands back
    # np.float64 scalars, not 0-d arrays, from 0-d arithmetic); lists and
    # every other dtype land in the default 32-bit storage. Row-major layout
    # is part of the Tensor contract (ascontiguousarray would turn 0-d
    # into 1-d, so it is applied only to higher ranks).
    if isinstance(data, (np.ndarray, np.floating)) and data.dtype == np.float64:
        arr = np.asarray(data)
    else:
        arr = np.asarray(data, dtype=DEFAULT_DTYPE)
    if arr.ndim > 1 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense float array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = _coerce(data)
        if not np.all(np.isfinite(arr)):
            raise FinitenessError("non-finite value in tensor of shape %s" % (arr.shape,))
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQ)

    # -- construction of op outputs -------------------------------------

    @staticmethod
    def _from_op(data, parents, backward) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Propagate from a scalar root through the tape, once per record."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root, got shape %s" % (self.shape,))
        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._backward is not None:
                nodes.append(node)
            for parent in node._parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self._accum(np.ones_like(self.data))
        for node in nodes:
            node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.data.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.data.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.data.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.data.dtype), self)

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype.name, self.requires_grad)


def _as_tensor(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        # python scalars adopt the partner's width so float64 graphs keep
        # full-precision constants instead of float32-quantized ones
        dtype = like if like is not None else DEFAULT_DTYPE
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    # Identical shapes only; a 0-d scalar on either side is the one exception.
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeMismatchError("%s: shapes %s and %s differ" % (op, a.shape, b.shape))


def _shrink_to(g: np.ndarray, shape) -> np.ndarray:
    # Reduce a broadcast gradient back to a scalar operand.
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(_shrink_to(g, a.shape))
        if b.requires_grad:
            b._accum(_shrink_to(g, b.shape))

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accum(_shrink_to(g, a.shape))
        if b.requires_grad:
            b._accum(_shrink_to(-g, b.shape))

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(_shrink_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_shrink_to(g * a.data, b.shape))

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def absolute(x: Tensor) -> Tensor:
    """|x| elementwise; derivative uses sign(x), 0 at the kink."""

    def backward(g):
        x._accum(g * np.sign(x.data))

    return Tensor._from_op(np.abs(x.data), (x,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    if a.shape != b.shape:
        raise ShapeMismatchError("maximum: shapes %s and %s differ" % (a.shape, b.shape))
    take_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a._accum(np.where(take_a, g, 0.0))
        if b.requires_grad:
            b._accum(np.where(take_a, 0.0, g))

    return Tensor._from_op(np.where(take_a, a.data, b.data), (a, b), backward)


# -- activations -------------------------------------------------------------


def hardswish(x: Tensor) -> Tensor:
    """x * clip(x + 3, 0, 6) / 6; at the +-3 kinks the left-continuous piece wins."""

    def backward(g):
        d = np.where(x.data <= -3.0, 0.0, np.where(x.data > 3.0, 1.0, (2.0 * x.data + 3.0) / 6.0))
        x._accum(g * d.astype(x.dtype, copy=False))

    y = x.data * np.clip(x.data + 3.0, 0.0, 6.0) / 6.0
    return Tensor._from_op(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    pos = x.data >= 0
    z = np.exp(np.where(pos, -x.data, x.data))
    y = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)

    def backward(g):
        x._accum(g * y * (1.0 - y))

    return Tensor._from_op(y, (x,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul: shapes %s and %s do not chain" % (a.shape, b.shape))

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError("transpose expects a matrix, got shape %s" % (x.shape,))

    def backward(g):
        x._accum(g.T)

    return Tensor._from_op(x.data.T.copy(), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accum(g.reshape(x.shape))

    return Tensor._from_op(x.data.reshape(shape), (x,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias row to every row of an n x d matrix."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeMismatchError("add_bias: shapes %s and %s" % (x.shape, b.shape))

    def backward(g):
        if x.requires_grad:
            x._accum(g)
        if b.requires_grad:
            b._accum(g.sum(axis=0, dtype=np.float64).astype(b.dtype, copy=False))

    return Tensor._from_op(x.data + b.data[None, :], (x, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add_bias(matmul(x, weight), bias)


# -- reductions ---------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(np.full_like(x.data, float(g)))

    return Tensor._from_op(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        x._accum(np.full_like(x.data, float(g) / n))

    return Tensor._from_op(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype), (x,), backward)


def abs_sum(x: Tensor) -> Tensor:
    """L1 norm as a scalar tensor."""

    def backward(g):
        x._accum((float(g) * np.sign(x.data)).astype(x.dtype, copy=False))

    total = np.abs(x.data, dtype=np.float64).sum(dtype=np.float64)
    return Tensor._from_op(np.asarray(total, dtype=x.dtype), (x,), backward)


# -- normalisation ------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by row-max subtraction."""
    if x.data.ndim != 2:
        raise ShapeMismatchError("softmax_rows expects a matrix, got shape %s" % (x.shape,))
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype, copy=False)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype, copy=False)
        x._accum(y * (g - dot))

    return Tensor._from_op(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each row to zero mean, unit variance, then scale and shift."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeMismatchError(
            "layer_norm: x %s, gain %s, shift %s" % (x.shape, gain.shape, shift.shape))
    mu = x.data.mean(axis=1, keepdims=True, dtype=np.float64)
    var = np.square(x.data - mu).mean(axis=1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = ((x.data - mu) * inv).astype(x.dtype, copy=False)
    y = xhat * gain.data[None, :] + shift.data[None, :]

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=0, dtype=np.float64).astype(gain.dtype, copy=False))
        if shift.requires_grad:
            shift._accum(g.sum(axis=0, dtype=np.float64).astype(shift.dtype, copy=False))
        if x.requires_grad:
            dxhat = g * gain.data[None, :]
            m1 = dxhat.mean(axis=1, keepdims=True, dtype=np.float64)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True, dtype=np.float64)
            dx = inv * (dxhat - m1 - xhat * m2)
            x._accum(dx.astype(x.dtype, copy=False))

    return Tensor._from_op(y, (x, gain, shift), backward)


def batch_norm_2d(x: Tensor, gain: Tensor, shift: Tensor,
                  running_mean: np.ndarray, running_var: np.ndarray,
                  momentum: float = 0.1, eps: float = 1e-5,
                  train: bool = False) -> Tensor:
    """Per-channel batch norm over (N, H, W) with running-stat buffers.

    Accepts (C, H, W) or (N, C, H, W). In training mode the batch statistics
    (population variance) normalise the activations and update the running
    buffers in place; in eval mode the buffers alone are used, keeping the
    forward pass a pure function of the inputs.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeMismatchError("batch_norm_2d expects (C,H,W) or (N,C,H,W), got %s" % (x.shape,))
    c = xd.shape[1]
    if gain.shape != (c,) or shift.shape != (c,) or running_mean.shape != (c,):
        raise ShapeMismatchError(
            "batch_norm_2d: channels %d, gain %s, shift %s" % (c, gain.shape, shift.shape))

    axes = (0, 2, 3)
    if train:
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = np.square(xd - mu[None, :, None, None]).mean(axis=axes, dtype=np.float64)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)[None, :, None, None]
    xhat = ((xd - mu[None, :, None, None]) * inv).astype(x.dtype, copy=False)
    y = xhat * gain.data[None, :, None, None] + shift.data[None, :, None, None]

    def backward(g):
        gd = g[None] if squeeze else g
        if gain.requires_grad:
            gain._accum((gd * xhat).sum(axis=axes, dtype=np.float64).astype(gain.dtype, copy=False))
        if shift.requires_grad:
            shift._accum(gd.sum(axis=axes, dtype=np.float64).astype(shift.dtype, copy=False))
        if x.requires_grad:
            dxhat = gd * gain.data[None, :, None, None]
            if train:
                m1 = dxhat.mean(axis=axes, dtype=np.float64)[None, :, None, None]
                m2 = (dxhat * xhat).mean(axis=axes, dtype=np.float64)[None, :, None, None]
                dx = inv * (dxhat - m1 - xhat * m2)
            else:
                dx = inv * dxhat
            dx = dx.astype(x.dtype, copy=False)
            x._accum(dx[0] if squeeze else dx)

    return Tensor._from_op(y[0] if squeeze else y, (x, gain, shift), backward)


# -- convolution and layout ---------------------------------------------------


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 0 or 1.

    x is (C_in, H, W) or (N, C_in, H, W); weight is (C_out, C_in, 3, 3).
    """
    if padding not in (0, 1):
        raise ValueError("padding must be 0 or 1, got %r" % (padding,))
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeMismatchError("conv2d_3x3 expects (C,H,W) or (N,C,H,W), got %s" % (x.shape,))
    n, ci, h, w = xd.shape
    if weight.data.ndim != 4 or weight.shape[1] != ci or weight.shape[2:] != (3, 3):
        raise ShapeMismatchError(
            "conv2d_3x3: input channels %d vs weight %s" % (ci, weight.shape))
    co = weight.shape[0]
    if bias.shape != (co,):
        raise ShapeMismatchError("conv2d_3x3: bias %s for %d filters" % (bias.shape, co))

    if padding:
        xp = np.zeros((n, ci, h + 2, w + 2), dtype=xd.dtype)
        xp[:, :, 1:-1, 1:-1] = xd
    else:
        xp = xd
    ho, wo = xp.shape[2] - 2, xp.shape[3] - 2
    if ho < 1 or wo < 1:
        raise ShapeMismatchError("conv2d_3x3: input %s too small for a 3x3 window" % (x.shape,))

    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, ci * 9, ho * wo)
    w2 = weight.data.reshape(co, ci * 9)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo) + bias.data[None, :, None, None]

    def backward(g):
        gd = (g[None] if squeeze else g).reshape(n, co, ho * wo)
        if bias.requires_grad:
            bias._accum(gd.sum(axis=(0, 2), dtype=np.float64).astype(bias.dtype, copy=False))
        if weight.requires_grad:
            dw = np.einsum("ncp,nkp->ck", gd, cols)
            weight._accum(dw.reshape(weight.shape).astype(weight.dtype, copy=False))
        if x.requires_grad:
            dcols = np.matmul(w2.T, gd).reshape(n, ci, 3, 3, ho, wo)
            dxp = np.zeros_like(xp)
            for r in range(3):
                for c in range(3):
                    dxp[:, :, r:r + ho, c:c + wo] += dcols[:, :, r, c]
            dx = dxp[:, :, 1:-1, 1:-1] if padding else dxp
            x._accum(dx[0] if squeeze else dx)

    return Tensor._from_op(out[0] if squeeze else out, (x, weight, bias), backward)


def pad_reflect2d(x: Tensor) -> Tensor:
    """Reflect-pad a 2-d image by one pixel on every side (edge not repeated)."""
    if x.data.ndim != 2:
        raise ShapeMismatchError("pad_reflect2d expects an image, got shape %s" % (x.shape,))
    h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatchError("pad_reflect2d: image %s too small to reflect" % (x.shape,))
    ri = np.abs(np.arange(-1, h + 1))
    ri[ri > h - 1] = 2 * (h - 1) - ri[ri > h - 1]
    rj = np.abs(np.arange(-1, w + 1))
    rj[rj > w - 1] = 2 * (w - 1) - rj[rj > w - 1]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ri[:, None], rj[None, :]), g)
        x._accum(dx)

    return Tensor._from_op(x.data[ri[:, None], rj[None, :]], (x,), backward)


def space_to_tokens(x: Tensor, patch: int) -> Tensor:
    """Cut (C, H, W) into non-overlapping patch x patch tiles, one row each.

    Tiles are ordered row-major over the patch grid; within a tile the layout
    is channel-major. Exact inverse of ``tokens_to_space``.
    """
    if x.data.ndim != 3:
        raise ShapeMismatchError("space_to_tokens expects (C,H,W), got %s" % (x.shape,))
    c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeMismatchError(
            "space_to_tokens: H=%d, W=%d not divisible by p=%d" % (h, w, patch))
    gh, gw = h // patch, w // patch

    def backward(g):
        x._accum(g.reshape(gh, gw, c, patch, patch)
                 .transpose(2, 0, 3, 1, 4).reshape(c, h, w))

    tokens = (x.data.reshape(c, gh, patch, gw, patch)
              .transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch))
    return Tensor._from_op(tokens, (x,), backward)


def tokens_to_space(tokens: Tensor, grid_h: int, grid_w: int, patch: int, channels: int) -> Tensor:
    """Reassemble token rows into (C, grid_h*p, grid_w*p); inverse of space_to_tokens."""
    s, k = tokens.shape
    if s != grid_h * grid_w or k != channels * patch * patch:
        raise ShapeMismatchError(
            "tokens_to_space: tokens %s vs grid %dx%d, p=%d, C=%d"
            % (tokens.shape, grid_h, grid_w, patch, channels))
    h, w = grid_h * patch, grid_w * patch

    def backward(g):
        tokens._accum(g.reshape(channels, grid_h, patch, grid_w, patch)
                      .transpose(1, 3, 0, 2, 4).reshape(s, k))

    img = (tokens.data.reshape(grid_h, grid_w, channels, patch, patch)
           .transpose(2, 0, 3, 1, 4).reshape(channels, h, w))
    return Tensor._from_op(img, (tokens,), backward)
