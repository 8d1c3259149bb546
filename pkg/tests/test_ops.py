"""Operator oracles: identity cases, symmetry cases, finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ts3d import ops
from ts3d.gradcheck import grad_check, rand_tensor
from ts3d.tensor import DimensionError, Tensor

RNG = np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_1x1_identity_kernel():
    x = Tensor(RNG.normal(size=(6, 5, 3)))
    k = Tensor(np.eye(3).reshape(1, 1, 3, 3))
    out = ops.conv2d(x, k, stride=1, padding=0)
    assert np.allclose(out.data, x.data)


def test_conv2d_box_kernel_constant_input():
    x = Tensor(np.full((8, 9, 2), 0.7))
    k = Tensor(np.full((3, 3, 2, 1), 1.0 / (9 * 2)))
    out = ops.conv2d(x, k, stride=1, padding=1)
    # interior positions see the full window and reproduce the constant
    assert np.allclose(out.data[1:-1, 1:-1, 0], 0.7)


def test_conv2d_output_extent():
    x = Tensor(np.zeros((11, 13, 2)))
    k = Tensor(np.zeros((3, 3, 2, 4)))
    out = ops.conv2d(x, k, stride=2, padding=1)
    assert out.shape == ((11 + 2 - 3) // 2 + 1, (13 + 2 - 3) // 2 + 1, 4)


def test_conv2d_channel_mismatch_names_axes():
    x = Tensor(np.zeros((5, 5, 3)))
    k = Tensor(np.zeros((3, 3, 4, 2)))
    with pytest.raises(DimensionError, match="axis 2"):
        ops.conv2d(x, k)


def test_conv2d_gradcheck_vs_finite_differences():
    rng = np.random.default_rng(7)
    x = rand_tensor(rng, (7, 9, 3))
    k = rand_tensor(rng, (3, 3, 3, 4))
    b = rand_tensor(rng, (4,))

    def f(x_, k_, b_):
        return ops.sum_(ops.mul(ops.conv2d(x_, k_, b_, stride=1, padding=1), _probe((7, 9, 4))))

    assert grad_check(f, [x, k, b], eps=1e-6) < 1e-6


def test_conv2d_strided_gradcheck():
    rng = np.random.default_rng(8)
    x = rand_tensor(rng, (9, 8, 2))
    k = rand_tensor(rng, (3, 3, 2, 3))

    def f(x_, k_):
        return ops.sum_(ops.mul(ops.conv2d(x_, k_, stride=2, padding=1), _probe((5, 4, 3))))

    assert grad_check(f, [x, k], eps=1e-6) < 1e-6


def _probe(shape):
    """Fixed random weights so the sum objective exercises all outputs."""
    return Tensor(np.random.default_rng(99).normal(size=shape), dtype=np.float64)


# ---------------------------------------------------------------------------
# bilinear sampling


def test_bilinear_integer_grid_is_bit_exact():
    feat = Tensor(RNG.normal(size=(5, 7, 4)), dtype=np.float64)
    pts = Tensor(np.array([[3.0, 2.0], [0.0, 0.0], [6.0, 4.0]]), dtype=np.float64)
    out = ops.bilinear_sample(feat, pts)
    assert out.data[0].tobytes() == feat.data[2, 3].tobytes()
    assert out.data[1].tobytes() == feat.data[0, 0].tobytes()
    assert out.data[2].tobytes() == feat.data[4, 6].tobytes()


def test_bilinear_midpoint_is_mean():
    feat = Tensor(RNG.normal(size=(4, 6, 3)), dtype=np.float64)
    pts = Tensor(np.array([[2.5, 1.0]]), dtype=np.float64)
    out = ops.bilinear_sample(feat, pts)
    assert np.allclose(out.data[0], 0.5 * (feat.data[1, 2] + feat.data[1, 3]))


def test_bilinear_out_of_bounds_is_zero():
    feat = Tensor(np.ones((4, 4, 2)))
    pts = Tensor(np.array([[-5.0, 1.0], [10.0, 10.0]], dtype=np.float32))
    out = ops.bilinear_sample(feat, pts)
    assert np.allclose(out.data, 0.0)


def test_bilinear_point_gradcheck():
    rng = np.random.default_rng(9)
    feat = rand_tensor(rng, (6, 8, 3))
    pts = Tensor(rng.uniform(0.3, 4.3, size=(5, 2)), dtype=np.float64, requires_grad=True)

    def f(feat_, pts_):
        return ops.sum_(ops.mul(ops.bilinear_sample(feat_, pts_), _probe((5, 3))))

    assert grad_check(f, [feat, pts], eps=1e-5) < 1e-5


# ---------------------------------------------------------------------------
# softmax family


def test_softmax_saturation():
    x = Tensor([1000.0, 0.0, 0.0])
    out = ops.softmax(x, axis=0)
    assert np.allclose(out.data, [1.0, 0.0, 0.0], atol=1e-9)


def test_softmax_uniform():
    for d in (2, 5, 24):
        out = ops.softmax(Tensor(np.zeros(d)), axis=0)
        assert np.allclose(out.data, 1.0 / d)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
def test_softmax_rows_sum_to_one(values):
    out = ops.softmax(Tensor(np.array(values, dtype=np.float64)), axis=0)
    assert out.data.min() > 0.0
    assert abs(out.data.sum() - 1.0) < 1e-6


def test_softmax_gradcheck():
    rng = np.random.default_rng(10)
    x = rand_tensor(rng, (4, 6))

    def f(x_):
        return ops.sum_(ops.mul(ops.softmax(x_, axis=1), _probe((4, 6))))

    assert grad_check(f, [x], eps=1e-6) < 1e-6


def test_sum_of_softmax_has_zero_gradient():
    rng = np.random.default_rng(11)
    x = rand_tensor(rng, (5,))
    err = grad_check(lambda x_: ops.sum_(ops.softmax(x_, axis=0)), [x], eps=1e-6)
    assert err < 1e-9


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(RNG.normal(size=(3, 7)), dtype=np.float64)
    a = ops.log_softmax(x, axis=1).data
    b = np.log(ops.softmax(x, axis=1).data)
    assert np.allclose(a, b, atol=1e-12)


def test_log_softmax_gradcheck():
    rng = np.random.default_rng(12)
    x = rand_tensor(rng, (3, 5))

    def f(x_):
        return ops.sum_(ops.mul(ops.log_softmax(x_, axis=1), _probe((3, 5))))

    assert grad_check(f, [x], eps=1e-6) < 1e-6


# ---------------------------------------------------------------------------
# remaining operators: identity / symmetry / finite differences


def test_matmul_identity():
    x = Tensor(RNG.normal(size=(4, 4)), dtype=np.float64)
    out = ops.matmul(x, Tensor(np.eye(4), dtype=np.float64))
    assert np.allclose(out.data, x.data)


def test_matmul_batched_matches_loop():
    a = RNG.normal(size=(3, 4, 5))
    b = RNG.normal(size=(3, 5, 2))
    out = ops.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    for i in range(3):
        assert np.allclose(out[i], a[i] @ b[i])


def test_matmul_shape_error():
    with pytest.raises(DimensionError, match="inner axes"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(13)
    a = rand_tensor(rng, (3, 4))
    b = rand_tensor(rng, (4, 2))

    def f(a_, b_):
        return ops.sum_(ops.mul(ops.matmul(a_, b_), _probe((3, 2))))

    assert grad_check(f, [a, b], eps=1e-6) < 1e-6


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(14)
    a = rand_tensor(rng, (2, 3, 4))
    b = rand_tensor(rng, (2, 4, 3))

    def f(a_, b_):
        return ops.sum_(ops.mul(ops.matmul(a_, b_), _probe((2, 3, 3))))

    assert grad_check(f, [a, b], eps=1e-6) < 1e-6


def test_relu_cases_and_gradcheck():
    x = Tensor([-1.0, 0.0, 2.0])
    assert np.allclose(ops.relu(x).data, [0.0, 0.0, 2.0])
    rng = np.random.default_rng(15)
    # keep values away from the kink
    x = Tensor(np.where(np.abs(v := rng.normal(size=12)) < 0.1, 0.5, v), dtype=np.float64,
               requires_grad=True)
    assert grad_check(lambda x_: ops.sum_(ops.mul(ops.relu(x_), _probe((12,)))), [x]) < 1e-6


def test_add_concat_identity_and_symmetry():
    a = Tensor(RNG.normal(size=(3, 4)), dtype=np.float64)
    z = Tensor(np.zeros((3, 4)), dtype=np.float64)
    assert np.allclose(ops.add(a, z).data, a.data)
    cat = ops.concat([a, z], axis=1)
    assert cat.shape == (3, 8)
    assert np.allclose(cat.data[:, :4], a.data)


def test_concat_gradcheck():
    rng = np.random.default_rng(16)
    a = rand_tensor(rng, (2, 3))
    b = rand_tensor(rng, (2, 2))

    def f(a_, b_):
        return ops.sum_(ops.mul(ops.concat([a_, b_], axis=1), _probe((2, 5))))

    assert grad_check(f, [a, b]) < 1e-6


def test_upsample2x_values_and_gradcheck():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3, 1))
    up = ops.upsample2x(x)
    assert up.shape == (4, 6, 1)
    assert np.allclose(up.data[0:2, 0:2, 0], 0.0)
    assert np.allclose(up.data[2:4, 4:6, 0], 5.0)
    rng = np.random.default_rng(17)
    xt = rand_tensor(rng, (3, 2, 2))

    def f(x_):
        return ops.sum_(ops.mul(ops.upsample2x(x_), _probe((6, 4, 2))))

    assert grad_check(f, [xt]) < 1e-6


def test_channel_norm_normalizes_and_gradcheck():
    rng = np.random.default_rng(18)
    x = Tensor(rng.normal(2.0, 3.0, size=(6, 5, 4)), dtype=np.float64)
    g = Tensor(np.ones(4), dtype=np.float64)
    b = Tensor(np.zeros(4), dtype=np.float64)
    out = ops.channel_norm(x, g, b).data
    assert np.allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-10)
    assert np.allclose(out.std(axis=(0, 1)), 1.0, atol=1e-4)

    xt = rand_tensor(rng, (4, 3, 2))
    gt = rand_tensor(rng, (2,), lo=0.5, hi=1.5)
    bt = rand_tensor(rng, (2,))

    def f(x_, g_, b_):
        return ops.sum_(ops.mul(ops.channel_norm(x_, g_, b_), _probe((4, 3, 2))))

    assert grad_check(f, [xt, gt, bt], eps=1e-6) < 1e-6


def test_elementwise_gradchecks():
    rng = np.random.default_rng(19)
    x = rand_tensor(rng, (7,), lo=0.2, hi=2.0)
    y = rand_tensor(rng, (7,), lo=0.2, hi=2.0)
    checks = [
        (lambda a, b: ops.sum_(ops.mul(ops.add(a, b), _probe((7,)))), [x, y]),
        (lambda a, b: ops.sum_(ops.mul(ops.sub(a, b), _probe((7,)))), [x, y]),
        (lambda a, b: ops.sum_(ops.mul(ops.mul(a, b), _probe((7,)))), [x, y]),
        (lambda a: ops.sum_(ops.mul(ops.exp(a), _probe((7,)))), [x]),
        (lambda a: ops.sum_(ops.mul(ops.log(a), _probe((7,)))), [x]),
        (lambda a: ops.sum_(ops.mul(ops.sigmoid(a), _probe((7,)))), [x]),
        (lambda a: ops.sum_(ops.mul(ops.pow_const(a, 2.0), _probe((7,)))), [x]),
        (lambda a: ops.sum_(ops.mul(ops.abs_(a), _probe((7,)))), [x]),
    ]
    for f, args in checks:
        assert grad_check(f, args, eps=1e-6) < 1e-6


def test_shape_op_gradchecks():
    rng = np.random.default_rng(20)
    x = rand_tensor(rng, (3, 4, 2))
    fns = [
        lambda a: ops.sum_(ops.mul(ops.reshape(a, (6, 4)), _probe((6, 4)))),
        lambda a: ops.sum_(ops.mul(ops.transpose(a, (2, 0, 1)), _probe((2, 3, 4)))),
        lambda a: ops.sum_(ops.mul(ops.narrow(a, 1, 1, 2), _probe((3, 2, 2)))),
        lambda a: ops.sum_(ops.mul(ops.take_rows(a, np.array([2, 0, 2])), _probe((3, 4, 2)))),
    ]
    for f in fns:
        assert grad_check(f, [x]) < 1e-6


def test_where_and_clamp():
    mask = np.array([True, False, True])
    a = Tensor([1.0, 1.0, 1.0])
    b = Tensor([5.0, 5.0, 5.0])
    assert np.allclose(ops.where(mask, a, b).data, [1.0, 5.0, 1.0])
    c = ops.clamp(Tensor([-2.0, 0.5, 9.0]), 0.0, 1.0)
    assert np.allclose(c.data, [0.0, 0.5, 1.0])
    rng = np.random.default_rng(21)
    x = rand_tensor(rng, (6,))
    y = rand_tensor(rng, (6,))
    m = rng.uniform(size=6) > 0.5

    def f(a_, b_):
        return ops.sum_(ops.mul(ops.where(m, a_, b_), _probe((6,))))

    assert grad_check(f, [x, y]) < 1e-6


# ---------------------------------------------------------------------------
# property: every float64 forward at three shapes passes the fd oracle


@pytest.mark.parametrize("shape", [(3, 4, 2), (5, 2, 3), (2, 7, 1)])
def test_operator_suite_multiple_shapes(shape):
    rng = np.random.default_rng(sum(shape))
    h, w, c = shape
    x = rand_tensor(rng, shape)
    k = rand_tensor(rng, (3, 3, c, 2))

    def f(x_, k_):
        y = ops.conv2d(x_, k_, stride=1, padding=1)
        y = ops.relu(y)
        y = ops.softmax(y, axis=-1)
        return ops.sum_(ops.mul(y, _probe((h, w, 2))))

    assert grad_check(f, [x, k], eps=1e-6) < 1e-6
