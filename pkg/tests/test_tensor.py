import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phaedra import tensor as T
from phaedra.gradcheck import check_op
from phaedra.nn import AttnBlock
from phaedra.tensor import NonFiniteError, ShapeError, Tensor

OP_TOL = 1e-6


def rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------- conv2d


def test_conv_ones_kernel_corner_and_center():
    x = Tensor(np.ones((1, 4, 4)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, w, Tensor(np.zeros(1)), 1, 1).data
    assert y.shape == (1, 4, 4)
    assert y[0, 0, 0] == 4
    assert y[0, 1, 1] == 9


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), 1, 0).data
    np.testing.assert_array_equal(y, x)


def test_conv_stride_two_output_extent():
    x = Tensor(np.zeros((2, 4, 4)))
    w = Tensor(np.zeros((3, 2, 3, 3)))
    assert T.conv2d(x, w, None, 2, 1).shape == (3, 2, 2)


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(1)
    x, w, b = rand(rng, 2, 3, 6, 5), rand(rng, 4, 3, 3, 3), rand(rng, 4)
    for stride, pad in [(1, 1), (1, 0), (2, 1), (2, 0)]:
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (6 + 2 * pad - 3) // stride + 1
        wo = (5 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize(
    "shape_x,shape_w,stride,pad",
    [((2, 3, 5, 5), (4, 3, 3, 3), 1, 1), ((2, 3, 6, 6), (2, 3, 3, 3), 2, 1), ((3, 4, 4), (2, 3, 1, 1), 1, 0)],
)
def test_conv_gradients(shape_x, shape_w, stride, pad):
    rng = np.random.default_rng(2)
    err = check_op(
        lambda x, w, b: T.conv2d(x, w, b, stride, pad), [rand(rng, *shape_x), rand(rng, *shape_w), rand(rng, shape_w[0])]
    )
    assert err < OP_TOL


def test_conv_errors():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


# ---------------------------------------------------------------- upsample


def test_upsample_blocks():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    y = T.upsample_nearest(x, 2).data[0]
    np.testing.assert_array_equal(y, np.kron([[1, 2], [3, 4]], np.ones((2, 2))))


def test_upsample_factor_one_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 3))
    np.testing.assert_array_equal(T.upsample_nearest(Tensor(x), 1).data, x)


def test_upsample_backward_sums_blocks():
    x = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    T.backward(T.sum(T.upsample_nearest(x, 2)))
    np.testing.assert_array_equal(x.grad, np.full((1, 2, 2), 4.0))


def test_upsample_rejects_bad_factor():
    with pytest.raises(ValueError):
        T.upsample_nearest(Tensor(np.zeros((1, 2, 2))), 0)


# ---------------------------------------------------------------- elementwise and reductions


def test_elementwise_values():
    assert T.tanh(Tensor(np.array(0.0))).item() == 0.0
    assert T.silu(Tensor(np.array(0.0))).item() == 0.0
    z = Tensor(np.array(1.0), requires_grad=True)
    T.backward(T.tanh(z))
    assert z.grad == pytest.approx(1 - math.tanh(1) ** 2, abs=1e-12)
    assert z.grad == pytest.approx(0.419974, abs=1e-6)


@pytest.mark.parametrize(
    "fn,n_in",
    [
        (T.tanh, 1),
        (T.silu, 1),
        (T.sigmoid, 1),
        (T.square, 1),
        (lambda a: T.scale(a, -1.7), 1),
        (T.neg, 1),
        (T.add, 2),
        (T.sub, 2),
        (T.mul, 2),
        (T.sum, 1),
        (T.mean, 1),
        (T.max_abs, 1),
        (lambda a: T.softmax(a, axis=-1), 1),
        (lambda a: T.reshape(a, (12,)), 1),
        (lambda a: T.transpose(a, (1, 0)), 1),
        (lambda a: T.slice_axis(a, 1, 3, axis=1), 1),
        (lambda a, b: T.concat([a, b], axis=0), 2),
    ],
)
def test_op_gradients(fn, n_in):
    rng = np.random.default_rng(3)
    assert check_op(fn, [rand(rng, 3, 4) for _ in range(n_in)]) < OP_TOL


def test_abs_gradient_away_from_kink():
    x = np.array([[-1.5, 0.7], [2.0, -0.3]])
    assert check_op(T.absolute, [x]) < OP_TOL


def test_matmul_gradient():
    rng = np.random.default_rng(4)
    assert check_op(T.matmul, [rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)]) < OP_TOL


def test_group_norm_gradient():
    rng = np.random.default_rng(5)
    err = check_op(lambda x, g, b: T.group_norm(x, 2, g, b), [rand(rng, 2, 4, 3, 3), rand(rng, 4), rand(rng, 4)])
    assert err < OP_TOL


def test_group_norm_normalizes_groups():
    x = np.random.default_rng(6).standard_normal((2, 8, 4, 4)) * 3 + 1
    y = T.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0).data
    g = y.reshape(2, 4, -1)
    np.testing.assert_allclose(g.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(g.var(axis=-1), 1, atol=1e-10)


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3)))
    assert T.add(a, Tensor(np.array(2.0))).data[0, 0] == 3.0
    with pytest.raises(ShapeError):
        T.add(a, Tensor(np.ones(3)))


def test_reductions():
    assert T.mean(Tensor(np.array([1.0, 2.0, 3.0]))).item() == 2.0
    assert T.max_abs(Tensor(np.array([-3.0, 2.0]))).item() == 3.0
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    y = Tensor(np.array([-3.0, 2.0]), requires_grad=True)
    T.backward(T.max_abs(y))
    np.testing.assert_array_equal(y.grad, [-1.0, 0.0])
    with pytest.raises(ShapeError):
        T.sum(Tensor(np.zeros(0)))


# ---------------------------------------------------------------- attention


def test_attention_zero_projection_is_identity():
    rng = np.random.default_rng(7)
    blk = AttnBlock(rng, 8, groups=2).astype(np.float64)
    blk.proj.weight.data[:] = 0
    blk.proj.bias.data[:] = 0
    x = rng.standard_normal((8, 3, 3))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(8)
    blk = AttnBlock(rng, 8, groups=2).astype(np.float64)
    x = rng.standard_normal((8, 4, 4))
    perm = rng.permutation(16)
    xp = x.reshape(8, 16)[:, perm].reshape(8, 4, 4)
    y = blk(Tensor(x)).data.reshape(8, 16)[:, perm]
    np.testing.assert_allclose(blk(Tensor(xp)).data.reshape(8, 16), y, atol=1e-12)


def test_attention_gradient_small_input():
    rng = np.random.default_rng(9)
    blk = AttnBlock(rng, 2, groups=1).astype(np.float64)
    x = rng.standard_normal((2, 2, 2))

    def fn(t):
        return blk(t)

    assert check_op(fn, [x]) < OP_TOL


def test_attention_position_cap():
    blk = AttnBlock(np.random.default_rng(0), 8, groups=2, max_positions=16)
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((8, 5, 5), dtype=np.float32)))


# ---------------------------------------------------------------- backward


def test_backward_linear_and_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    w = Tensor(np.array([0.3, 0.1, -0.4]), requires_grad=True)
    T.backward(T.sum(T.mul(w, Tensor(x))))
    np.testing.assert_array_equal(w.grad, x)
    t = np.array([0.5, 0.5, 0.5])
    xv = Tensor(x.copy(), requires_grad=True)
    T.backward(T.mean(T.square(T.sub(xv, Tensor(t)))))
    np.testing.assert_allclose(xv.grad, 2 * (x - t) / 3, rtol=1e-15)


def test_fan_out_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.sum(T.add(y, x)))
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.scale(x, 2.0))


def test_unreachable_parameters_get_zero():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ga, gb = T.grad(T.sum(a), [a, b])
    np.testing.assert_array_equal(ga, [1, 1])
    np.testing.assert_array_equal(gb, [0, 0, 0])


def test_non_finite_detection():
    with pytest.raises(NonFiniteError):
        T.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        T.add(Tensor(np.array([np.nan])), Tensor(np.array([1.0])))


def test_forward_determinism():
    rng = np.random.default_rng(10)
    x, w = rand(rng, 2, 8, 9, 9).astype(np.float32), rand(rng, 8, 8, 3, 3).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.integers(1, 64), elements=st.floats(-3, 3)))
def test_tanh_gradient_property(x):
    assert check_op(T.tanh, [x]) < OP_TOL


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(3, 5), st.integers(3, 5))
def test_conv_gradient_property(c, h, w):
    rng = np.random.default_rng(c * 100 + h * 10 + w)
    err = check_op(lambda x, k: T.conv2d(x, k, None, 1, 1), [rand(rng, c, h, w), rand(rng, 2, c, 3, 3)])
    assert err < OP_TOL
