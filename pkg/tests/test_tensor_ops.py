import numpy as np
import numpy.testing as npt
import pytest

from segheads.gradcheck import check_gradients, finite_diff_grad, relative_error
from segheads.tensor import (ShapeError, Tensor, attention, bilinear_resize,
                             conv2d, conv_transpose2d, gelu, layernorm,
                             matmul, relu, softmax, tsum)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    b = rng.uniform(-1, 1, (3, 3))
    out = matmul(t64(np.eye(3)), t64(b))
    npt.assert_array_equal(out.data, b)


def test_matmul_hand_case():
    out = matmul(t64([[1, 2], [3, 4]]), t64([[0], [1]]))
    npt.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    err = check_gradients(
        lambda a, b: tsum(matmul(a, b)),
        [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))])
    assert err < 1e-6


# -- conv2d ------------------------------------------------------------------


def test_conv2d_unit_kernel_is_identity():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (1, 1, 4, 4))
    w = np.ones((1, 1, 1, 1))
    out = conv2d(t64(x), t64(w), t64(np.zeros(1)), stride=1, pad=0)
    npt.assert_array_equal(out.data, x)


def test_conv2d_ones_enumeration():
    out = conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 2, 2))),
                 t64(np.zeros(1)), stride=1, pad=0)
    npt.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_stride_mismatch_raises():
    with pytest.raises(ShapeError):
        conv2d(t64(np.ones((1, 1, 5, 5))), t64(np.ones((1, 1, 2, 2))),
               t64(np.zeros(1)), stride=2, pad=0)


def test_conv2d_kernel_too_large_raises():
    with pytest.raises(ShapeError):
        conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 5, 5))),
               t64(np.zeros(1)), stride=1, pad=0)


def test_conv2d_all_grads_match_finite_differences():
    rng = np.random.default_rng(3)
    err = check_gradients(
        lambda x, w, b: tsum(conv2d(x, w, b, stride=1, pad=1)),
        [rng.uniform(-1, 1, (2, 2, 4, 4)), rng.uniform(-1, 1, (3, 2, 3, 3)),
         rng.uniform(-1, 1, (3,))])
    assert err < 1e-6


# -- conv_transpose2d ----------------------------------------------------------


def test_conv_transpose_enumeration():
    v = 3.25
    out = conv_transpose2d(t64(np.full((1, 1, 1, 1), v)),
                           t64(np.ones((1, 1, 2, 2))), t64(np.zeros(1)), stride=2)
    npt.assert_array_equal(out.data, np.full((1, 1, 2, 2), v))


def test_conv_transpose_adjoint_identity():
    # the same weight array serves both sides: conv2d reads it as (out, in,
    # kh, kw), the transposed op as (in, out, kh, kw)
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    w = rng.uniform(-1, 1, (4, 3, 2, 2))
    y = rng.uniform(-1, 1, (2, 4, 3, 3))       # conv2d(x) shape at stride 2
    fwd = conv2d(t64(x), t64(w), t64(np.zeros(4)), stride=2, pad=0)
    bwd = conv_transpose2d(t64(y), t64(w), t64(np.zeros(3)), stride=2)
    lhs = float((fwd.data * y).sum())
    rhs = float((x * bwd.data).sum())
    assert abs(lhs - rhs) < 1e-10


def test_conv_transpose_grads_match_finite_differences():
    rng = np.random.default_rng(5)
    err = check_gradients(
        lambda x, w, b: tsum(conv_transpose2d(x, w, b, stride=2)),
        [rng.uniform(-1, 1, (1, 2, 3, 3)), rng.uniform(-1, 1, (2, 3, 2, 2)),
         rng.uniform(-1, 1, (3,))])
    assert err < 1e-6


# -- layernorm -----------------------------------------------------------------


def test_layernorm_constant_row_is_zero():
    out = layernorm(t64(np.full((2, 5), 7.0)), t64(np.ones(5)), t64(np.zeros(5)),
                    eps=1e-5)
    npt.assert_array_equal(out.data, np.zeros((2, 5)))


def test_layernorm_symmetric_row():
    out = layernorm(t64([[1.0, -1.0]]), t64(np.ones(2)), t64(np.zeros(2)),
                    eps=1e-12)
    npt.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layernorm_grad_matches_finite_differences():
    rng = np.random.default_rng(6)
    err = check_gradients(
        lambda x, g, b: tsum(layernorm(x, g, b, eps=1e-6) ** 2.0),
        [rng.uniform(-1, 1, (3, 5)), rng.uniform(0.5, 1.5, (5,)),
         rng.uniform(-0.5, 0.5, (5,))])
    assert err < 1e-6


# -- softmax -------------------------------------------------------------------


def test_softmax_uniform():
    out = softmax(t64([0.0, 0.0, 0.0]), axis=-1)
    npt.assert_allclose(out.data, np.full(3, 1 / 3), rtol=1e-12)


def test_softmax_large_logits_no_overflow():
    out = softmax(t64([1000.0, 0.0]), axis=-1)
    assert np.isfinite(out.data).all()
    npt.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(7)
    x = rng.uniform(-2, 2, (4, 6))
    a = softmax(t64(x), axis=-1).data
    b = softmax(t64(x + 13.7), axis=-1).data
    assert np.abs(a - b).max() < 1e-12


def test_softmax_rows_sum_to_one_float32():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = Tensor(rng.uniform(-5, 5, (8, 9)).astype(np.float32))
        sums = softmax(x, axis=-1).data.sum(axis=-1)
        npt.assert_allclose(sums, np.ones(8), atol=1e-6)


# -- activations ---------------------------------------------------------------


def test_relu_values():
    out = relu(t64([-1.0, 2.0]))
    npt.assert_array_equal(out.data, [0.0, 2.0])


def test_gelu_zero():
    assert gelu(t64([0.0])).item() == 0.0


def test_activation_grads():
    rng = np.random.default_rng(9)
    x = rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    assert check_gradients(lambda t: tsum(relu(t) * t), [x]) < 1e-6
    assert check_gradients(lambda t: tsum(gelu(t) * t),
                           [rng.uniform(-2, 2, (3, 4))]) < 1e-6


# -- attention -----------------------------------------------------------------


def test_attention_single_key_matches_projected_value():
    rng = np.random.default_rng(10)
    q = rng.uniform(-1, 1, (5, 4))
    k = rng.uniform(-1, 1, (1, 4))
    v = rng.uniform(-1, 1, (1, 4))
    w = rng.uniform(-1, 1, (4, 4))
    out = attention(t64(q), t64(k), t64(v), t64(w), heads=2)
    expected = np.tile(v @ w, (5, 1))
    npt.assert_allclose(out.data, expected, atol=1e-12)


def test_attention_key_value_permutation_invariance():
    rng = np.random.default_rng(11)
    q = rng.uniform(-1, 1, (3, 4))
    k = rng.uniform(-1, 1, (6, 4))
    v = rng.uniform(-1, 1, (6, 4))
    w = rng.uniform(-1, 1, (4, 4))
    perm = rng.permutation(6)
    a = attention(t64(q), t64(k), t64(v), t64(w), heads=2).data
    b = attention(t64(q), t64(k[perm]), t64(v[perm]), t64(w), heads=2).data
    npt.assert_allclose(a, b, atol=1e-12)


def test_attention_head_divisibility_error():
    with pytest.raises(ShapeError):
        attention(t64(np.ones((2, 5))), t64(np.ones((2, 5))),
                  t64(np.ones((2, 5))), t64(np.ones((5, 5))), heads=2)


def test_attention_grads_match_finite_differences():
    rng = np.random.default_rng(12)
    err = check_gradients(
        lambda q, k, v, w: tsum(attention(q, k, v, w, heads=2) ** 2.0),
        [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 4)),
         rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (4, 4))])
    assert err < 1e-6


# -- bilinear resize -------------------------------------------------------------


def test_bilinear_resize_identity():
    rng = np.random.default_rng(13)
    x = rng.uniform(0.1, 1.0, (1, 2, 5, 7))
    out = bilinear_resize(t64(x), 5, 7)
    npt.assert_array_equal(out.data, x)


def test_bilinear_resize_constant():
    out = bilinear_resize(t64(np.full((1, 1, 3, 3), 2.5)), 8, 5)
    npt.assert_allclose(out.data, np.full((1, 1, 8, 5), 2.5), rtol=1e-6)


def test_bilinear_resize_hand_midpoints():
    out = bilinear_resize(t64(np.array([[[[0.0, 2.0]]]])), 1, 4)
    npt.assert_allclose(out.data.reshape(-1), [0.0, 0.5, 1.5, 2.0], atol=1e-12)


# -- backward / finite differences ----------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    tsum(x).backward()
    npt.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_two_x():
    data = np.arange(1, 5, dtype=np.float64)
    x = Tensor(data, requires_grad=True)
    tsum(x * x).backward()
    npt.assert_array_equal(x.grad, 2 * data)


def test_backward_accumulates_until_zeroed():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = tsum(x * x)
    loss.backward()
    first = x.grad.copy()
    loss2 = tsum(x * x)
    loss2.backward()
    npt.assert_array_equal(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * x).backward()


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(14)

    def build(x, w, g, b, q):
        y = conv2d(x, w, Tensor(np.zeros(4)), stride=1, pad=1)   # (1,4,3,3)
        y = y.reshape(1, 4, 9).transpose(0, 2, 1)                # tokens (1,9,4)
        y = layernorm(y, g, b, eps=1e-6)
        y = attention(y, y, y, q, heads=2)
        return tsum(y * y)

    err = check_gradients(build, [
        rng.uniform(-1, 1, (1, 2, 3, 3)), rng.uniform(-1, 1, (4, 2, 3, 3)),
        rng.uniform(0.5, 1.5, (4,)), rng.uniform(-0.5, 0.5, (4,)),
        rng.uniform(-1, 1, (4, 4))])
    assert err < 1e-5


def test_finite_diff_of_sum_is_ones():
    rng = np.random.default_rng(15)
    x = rng.uniform(-1, 1, (2, 3))
    fd = finite_diff_grad(lambda a: float(a.sum()), x)
    npt.assert_allclose(fd, np.ones((2, 3)), atol=1e-9)


def test_finite_diff_square_at_three():
    fd = finite_diff_grad(lambda a: float((a ** 2).sum()), np.array([3.0]),
                          eps=1e-5)
    assert abs(fd[0] - 6.0) < 1e-8


def test_relative_error_handles_zeros():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_ops_are_deterministic():
    rng = np.random.default_rng(16)
    x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
    w = rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32)
    b = rng.uniform(-1, 1, (4,)).astype(np.float32)
    one = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
    two = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
    assert one.tobytes() == two.tobytes()
