"""Compiled and numpy kernel backends must agree bit for bit."""

import numpy as np
import pytest

from segheads import backend
from segheads.tensor import Tensor, conv2d, conv_transpose2d, tsum

needs_compiled = pytest.mark.skipif(
    "compiled" not in backend.available_backends(),
    reason="compiled extension not built")


@pytest.fixture()
def restore_backend():
    previous = backend.active_backend()
    yield
    backend.use_backend(previous)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_bitwise_equal(dtype, stride):
    rng = np.random.default_rng(0)
    xp = rng.uniform(-1, 1, (2, 3, 9, 9)).astype(dtype)
    a = backend._numpy_im2col(xp, 3, 3, stride)
    b = backend._compiled_im2col(xp, 3, 3, stride)
    assert a.tobytes() == b.tobytes()


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2, 3])
def test_col2im_bitwise_equal(dtype, stride):
    rng = np.random.default_rng(1)
    h = w = 2 + 2 * stride
    oh = (h - 2) // stride + 1
    cols = rng.uniform(-1, 1, (2, 3 * 2 * 2, oh * oh)).astype(dtype)
    a = backend._numpy_col2im(cols, 2, 3, h, w, 2, 2, stride)
    b = backend._compiled_col2im(cols, 2, 3, h, w, 2, 2, stride)
    assert a.tobytes() == b.tobytes()


@needs_compiled
def test_conv_forward_backward_bitwise_across_backends(restore_backend):
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
    w = rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32)
    b = rng.uniform(-1, 1, (4,)).astype(np.float32)
    wt = rng.uniform(-1, 1, (3, 2, 2, 2)).astype(np.float32)
    bt = rng.uniform(-1, 1, (2,)).astype(np.float32)

    results = {}
    for name in ("numpy", "compiled"):
        backend.use_backend(name)
        xs = Tensor(x, requires_grad=True)
        ws = Tensor(w, requires_grad=True)
        bs = Tensor(b, requires_grad=True)
        wts = Tensor(wt, requires_grad=True)
        bts = Tensor(bt, requires_grad=True)
        y = conv2d(xs, ws, bs, stride=1, pad=1)
        z = conv_transpose2d(y, wts, bts, stride=2)
        tsum(z * z).backward()
        results[name] = (z.data.tobytes(), xs.grad.tobytes(), ws.grad.tobytes(),
                         bs.grad.tobytes(), wts.grad.tobytes(), bts.grad.tobytes())
    assert results["numpy"] == results["compiled"]


def test_forced_backend_env_rejects_unknown(monkeypatch):
    with pytest.raises(ValueError):
        backend.use_backend("gpu")
