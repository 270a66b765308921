"""Convolution kernel backends: compiled extension with a numpy fallback.

The hot kernels are patch extraction (im2col) and its scatter-add adjoint
(col2im); everything else in the engine is BLAS-bound either way. At import
we pick the compiled Cython extension when it is present, otherwise a pure
numpy implementation. Both produce bitwise-identical buffers (im2col is a
copy, col2im accumulates per output cell in the same kernel-offset order),
so the choice affects speed only.

``SEGHEADS_BACKEND=numpy|compiled`` forces a backend; ``use_backend`` does
the same programmatically (used by the benchmark and the equivalence tests).
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

try:
    from . import _kernels
    _HAVE_COMPILED = True
except ImportError:
    _kernels = None
    _HAVE_COMPILED = False


def _numpy_im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return windows.reshape(n, c * kh * kw, oh * ow)


def _numpy_col2im(cols: np.ndarray, n: int, c: int, h: int, w: int,
                  kh: int, kw: int, stride: int) -> np.ndarray:
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        top = ki + stride * oh
        for kj in range(kw):
            left = kj + stride * ow
            out[:, :, ki:top:stride, kj:left:stride] += cols6[:, :, ki, kj]
    return out


def _compiled_im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return _kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride)


def _compiled_col2im(cols: np.ndarray, n: int, c: int, h: int, w: int,
                     kh: int, kw: int, stride: int) -> np.ndarray:
    return _kernels.col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride)


_IMPLS = {
    "numpy": (_numpy_im2col, _numpy_col2im),
    "compiled": (_compiled_im2col, _compiled_col2im),
}


def available_backends() -> tuple[str, ...]:
    return ("numpy", "compiled") if _HAVE_COMPILED else ("numpy",)


def _default_backend() -> str:
    forced = os.environ.get("SEGHEADS_BACKEND", "").strip().lower()
    if forced:
        if forced not in _IMPLS:
            raise ValueError(f"SEGHEADS_BACKEND must be 'numpy' or 'compiled', got {forced!r}")
        if forced == "compiled" and not _HAVE_COMPILED:
            raise ImportError("SEGHEADS_BACKEND=compiled but segheads._kernels is not built")
        return forced
    return "compiled" if _HAVE_COMPILED else "numpy"


_ACTIVE = _default_backend()
im2col, col2im = _IMPLS[_ACTIVE]


def active_backend() -> str:
    return _ACTIVE


def use_backend(name: str) -> None:
    """Switch the kernel implementation (tests and benchmarks only)."""
    global _ACTIVE, im2col, col2im
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not _HAVE_COMPILED:
        raise ImportError("compiled backend requested but segheads._kernels is not built")
    _ACTIVE = name
    im2col, col2im = _IMPLS[name]
