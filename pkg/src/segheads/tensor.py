"""Dense tensors with reverse-mode automatic differentiation.

The engine is a thin autograd layer over numpy arrays: every operation
records its inputs and a backward closure on the output tensor, and
``backward()`` walks the resulting DAG once in reverse topological order.
Only float32 and float64 buffers are supported; float64 exists for
finite-difference gradient checking, float32 is the training default.

The convolution kernels route through :mod:`segheads.backend`, which picks
the compiled extension when available and an equivalent numpy path
otherwise. Both backends produce bitwise-identical results.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an operation."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-dimensional float array that can participate in autodiff.

    ``grad`` is allocated lazily and accumulates across backward passes
    until explicitly cleared; tensors with ``requires_grad=False`` never
    accumulate gradient and backward traversal does not descend into
    subgraphs that cannot reach a gradient-requiring leaf.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- gradient accumulation ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must hold a single scalar. Repeated calls keep adding into
        leaf ``grad`` buffers; call ``zero_grad`` between steps to reset.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        # Reverse topological order over the gradient-requiring subgraph.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node.grad = None  # interior grads are transient

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self.dtype)))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and structural ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power() supports scalar exponents only")
    e = float(exponent)
    data = a.data ** e

    def backward(g):
        a._accumulate(g * e * a.data ** (e - 1.0))

    return Tensor._from_op(data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return Tensor._from_op(data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._from_op(np.log(a.data), (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / data))

    return Tensor._from_op(data, (a,), backward)


def ttanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return Tensor._from_op(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._from_op(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return Tensor._from_op(a.data.transpose(axes), (a,), backward)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = np.broadcast_to(a.data, shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    # broadcast views are read-only; later ops never write, so this is safe
    return Tensor._from_op(data, (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return Tensor._from_op(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return Tensor._from_op(data, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            t._accumulate(part)

    return Tensor._from_op(data, tuple(tensors), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._from_op(data, (a, b), backward)


# -- activations and normalization ----------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return Tensor._from_op(data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        a._accumulate(g * local.astype(x.dtype, copy=False))

    return Tensor._from_op(data.astype(x.dtype, copy=False), (a,), backward)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return Tensor._from_op(data, (a,), backward)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def backward(g):
        a._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(data, (a,), backward)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ShapeError("layernorm affine parameters must match the last axis")
    mu = tmean(a, axis=-1, keepdims=True)
    centered = a - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return centered * inv * gamma + beta


# -- convolution ---------------------------------------------------------------


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if k > size + 2 * pad:
        raise ShapeError(f"kernel {k} exceeds padded extent {size + 2 * pad}")
    if span % stride != 0:
        raise ShapeError(
            f"extent {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not tile evenly")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation of NCHW input with OIHW weights."""
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channels differ: input {cin}, weight {cin_w}")
    if b.shape != (cout,):
        raise ShapeError("conv2d bias must have one entry per output channel")
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(wid, kw, stride, pad)

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    cols = backend.im2col(xp, kh, kw, stride)          # (n, cin*kh*kw, oh*ow)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols) + b.data.reshape(1, cout, 1)
    data = out.reshape(n, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(n, cout, oh * ow)
        b._accumulate(g2.sum(axis=(0, 2)))
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
        w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dxp = backend.col2im(dcols, n, cin, h + 2 * pad, wid + 2 * pad,
                                 kh, kw, stride)
            if pad:
                dxp = dxp[:, :, pad:pad + h, pad:pad + wid]
            x._accumulate(dxp)

    return Tensor._from_op(data, (x, w, b), backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Fractionally-strided convolution (adjoint of conv2d with pad 0).

    Weights are laid out IOHW; output extent is (H-1)*stride + kh.
    """
    if stride < 1:
        raise ShapeError("conv_transpose2d stride must be >= 1")
    n, cin, h, wid = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d channels differ: input {cin}, weight {cin_w}")
    if b.shape != (cout,):
        raise ShapeError("conv_transpose2d bias must have one entry per output channel")
    oh = (h - 1) * stride + kh
    ow = (wid - 1) * stride + kw

    w2 = w.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(n, cin, h * wid)
    cols = np.matmul(w2.T, x2)                         # (n, cout*kh*kw, h*wid)
    out = backend.col2im(cols, n, cout, oh, ow, kh, kw, stride)
    data = out + b.data.reshape(1, cout, 1, 1)

    def backward(g):
        b._accumulate(g.sum(axis=(0, 2, 3)))
        gcols = backend.im2col(g, kh, kw, stride)      # (n, cout*kh*kw, h*wid)
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2]))
        w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            dx = np.matmul(w2, gcols)
            x._accumulate(dx.reshape(x.shape))

    return Tensor._from_op(data, (x, w, b), backward)


# -- resampling ----------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for align_corners=False bilinear resizing."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        if src <= 0.0:
            m[i, 0] = 1.0
        elif src >= n_in - 1:
            m[i, n_in - 1] = 1.0
        else:
            lo = int(np.floor(src))
            frac = src - lo
            m[i, lo] = 1.0 - frac
            m[i, lo + 1] = frac
    return m


_INTERP_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _cached_interp(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _INTERP_CACHE.get(key)
    if mat is None:
        mat = _interp_matrix(n_in, n_out, dtype)
        _INTERP_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear NCHW resize (align_corners=False), expressed as two matmuls."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize output extents must be >= 1")
    n, c, h, w = x.shape
    ry = Tensor(_cached_interp(h, out_h, x.dtype))     # (out_h, h)
    rx = Tensor(_cached_interp(w, out_w, x.dtype).T)   # (w, out_w)
    flat = reshape(x, (n * c, h, w))
    out = matmul(matmul(ry, flat), rx)                 # (n*c, out_h, out_w)
    return reshape(out, (n, c, out_h, out_w))


# -- attention -----------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, w_out: Tensor, heads: int,
              b_out: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention with a final linear projection.

    Accepts (..., L, d) queries against (..., M, d) keys/values; the head
    split requires d to divide evenly by ``heads``.
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError("attention operands must share their last extent")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def split(t: Tensor) -> Tensor:
        *lead, n_tok, _ = t.shape
        t = reshape(t, (*lead, n_tok, heads, dh))
        ndim = t.ndim
        perm = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
        return transpose(t, perm)                      # (..., heads, tokens, dh)

    qh, kh_, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh_, _swap_last2(kh_.ndim))) * scale
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)                          # (..., heads, L, dh)
    ndim = ctx.ndim
    perm = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
    merged = reshape(transpose(ctx, perm), (*ctx.shape[:-3], q.shape[-2], d))
    out = matmul(merged, w_out)
    if b_out is not None:
        out = out + b_out
    return out


def _swap_last2(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
