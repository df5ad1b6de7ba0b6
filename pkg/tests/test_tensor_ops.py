"""Forward semantics of the op set against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import channel_avg_loops, channel_max_loops, conv2d_loops, maxpool_loops
from rsan import ShapeError, Tensor, backward, no_grad
from rsan import ops
from rsan.errors import PaddingRequiredError


def rand(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), dtype=dtype)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 3, 3, 1), dtype=np.float32))
    k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    assert np.array_equal(ops.conv2d(x, k).data, x.data)


def test_conv2d_center_sum():
    x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3, 1))
    k = Tensor(np.ones((3, 3, 1, 1), dtype=np.float32))
    out = ops.conv2d(x, k)
    assert out.data[0, 1, 1, 0] == 45.0
    assert np.allclose(out.data, conv2d_loops(x.data, k.data))


@pytest.mark.parametrize("shape,kshape,stride,padding", [
    ((2, 5, 6, 3), (3, 3, 3, 4), 1, "same"),
    ((1, 8, 8, 2), (7, 7, 2, 1), 1, "same"),
    ((1, 7, 7, 2), (1, 1, 2, 5), 1, "same"),
    ((2, 8, 8, 3), (3, 3, 3, 2), 2, "valid"),
    ((1, 6, 6, 1), (2, 2, 1, 1), 2, "valid"),
])
def test_conv2d_matches_loop_oracle(shape, kshape, stride, padding):
    rng = np.random.default_rng(42)
    x = Tensor(rng.standard_normal(shape), dtype=np.float64)
    k = Tensor(rng.standard_normal(kshape), dtype=np.float64)
    b = Tensor(rng.standard_normal(kshape[3]), dtype=np.float64)
    out = ops.conv2d(x, k, b, stride=stride, padding=padding)
    expected = conv2d_loops(x.data, k.data, b.data, stride=stride, padding=padding)
    assert out.shape == expected.shape
    assert np.allclose(out.data, expected, atol=1e-12)


def test_conv2d_channel_mismatch_names_both_shapes():
    x = rand((1, 4, 4, 3))
    k = rand((3, 3, 2, 4), seed=1)
    with pytest.raises(ShapeError) as exc:
        ops.conv2d(x, k)
    assert "(1, 4, 4, 3)" in str(exc.value) and "(3, 3, 2, 4)" in str(exc.value)


def test_conv2d_rejects_even_kernel_same_padding():
    with pytest.raises(ShapeError):
        ops.conv2d(rand((1, 4, 4, 1)), rand((2, 2, 1, 1), seed=1), padding="same")


def test_conv2d_pure():
    x, k = rand((1, 5, 5, 2)), rand((3, 3, 2, 2), seed=1)
    a = ops.conv2d(x, k).data
    b = ops.conv2d(x, k).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# conv2d_transpose


def test_transpose_single_pixel_spread():
    x = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    k = Tensor(np.ones((2, 2, 1, 1), dtype=np.float32))
    out = ops.conv2d_transpose(x, k)
    assert out.shape == (1, 2, 2, 1)
    assert np.array_equal(out.data, np.ones((1, 2, 2, 1), dtype=np.float32))


def test_transpose_doubles_shape():
    out = ops.conv2d_transpose(rand((1, 2, 2, 3)), rand((2, 2, 3, 5), seed=1))
    assert out.shape == (1, 4, 4, 5)


@pytest.mark.parametrize("seed", range(5))
def test_transpose_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 4, 5)), dtype=np.float64)
    k = Tensor(rng.standard_normal((2, 2, 5, 3)), dtype=np.float64)
    y = Tensor(rng.standard_normal((2, 6, 8, 3)), dtype=np.float64)
    lhs = float((ops.conv2d_transpose(x, k).data * y.data).sum())
    k_swapped = Tensor(np.ascontiguousarray(k.data.transpose(0, 1, 3, 2)), dtype=np.float64)
    rhs = float((ops.conv2d(y, k_swapped, stride=2, padding="valid").data * x.data).sum())
    assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-5


def test_transpose_kernel_must_match_stride():
    with pytest.raises(ShapeError):
        ops.conv2d_transpose(rand((1, 2, 2, 1)), rand((3, 3, 1, 1), seed=1), stride=2)


# ---------------------------------------------------------------------------
# maxpool2d


def test_maxpool_basic():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 2, 2, 1))
    out = ops.maxpool2d(x)
    assert out.data.ravel().tolist() == [4.0]


def test_maxpool_constant_input_routes_grad_to_first_element():
    x = Tensor(np.ones((1, 4, 4, 1), dtype=np.float64), requires_grad=True, dtype=np.float64)
    loss = ops.sum_all(ops.maxpool2d(x))
    backward(loss)
    expected = np.zeros((1, 4, 4, 1))
    expected[0, 0::2, 0::2, 0] = 1.0  # first scanned element of each 2x2 window
    assert np.array_equal(x.grad, expected)


def test_maxpool_matches_loop_oracle():
    x = Tensor(np.random.default_rng(3).standard_normal((1, 8, 8, 3)), dtype=np.float64)
    assert np.array_equal(ops.maxpool2d(x).data, maxpool_loops(x.data))


def test_maxpool_odd_dims_demand_padding():
    with pytest.raises(PaddingRequiredError) as exc:
        ops.maxpool2d(rand((1, 5, 4, 1)))
    assert "pad" in str(exc.value)


# ---------------------------------------------------------------------------
# channel reductions


def test_channel_max_examples():
    x = Tensor(np.array([1.0, 5.0, 3.0], dtype=np.float32).reshape(1, 1, 1, 3))
    assert ops.channel_max(x).data.ravel().tolist() == [5.0]
    single = rand((2, 3, 3, 1))
    assert np.array_equal(ops.channel_max(single).data, single.data)


def test_channel_max_matches_loop_oracle():
    x = Tensor(np.random.default_rng(5).standard_normal((2, 4, 4, 8)), dtype=np.float64)
    assert np.array_equal(ops.channel_max(x).data, channel_max_loops(x.data))


def test_channel_avg_examples():
    x = Tensor(np.array([1.0, 5.0, 3.0], dtype=np.float32).reshape(1, 1, 1, 3))
    assert ops.channel_avg(x).data.ravel().tolist() == [3.0]
    single = rand((2, 3, 3, 1))
    assert np.array_equal(ops.channel_avg(single).data, single.data)


def test_channel_avg_matches_loop_oracle():
    x = Tensor(np.random.default_rng(6).standard_normal((2, 4, 4, 8)), dtype=np.float64)
    assert np.allclose(ops.channel_avg(x).data, channel_avg_loops(x.data), atol=1e-12)


# ---------------------------------------------------------------------------
# concat


def test_concat_layout_and_roundtrip():
    a, b = rand((2, 3, 3, 1)), rand((2, 3, 3, 1), seed=1)
    out = ops.concat_channels(a, b)
    assert out.shape == (2, 3, 3, 2)
    assert np.array_equal(out.data[..., :1], a.data)
    assert np.array_equal(out.data[..., 1:], b.data)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels(rand((1, 3, 3, 1)), rand((1, 4, 3, 1), seed=1))


def test_concat_gradient_splits_by_channel():
    rng = np.random.default_rng(9)
    a = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal((1, 2, 2, 3)), requires_grad=True, dtype=np.float64)
    proj = Tensor(rng.standard_normal((1, 2, 2, 5)), dtype=np.float64)
    backward(ops.sum_all(ops.mul(ops.concat_channels(a, b), proj)))
    assert np.array_equal(a.grad, proj.data[..., :2])
    assert np.array_equal(b.grad, proj.data[..., 2:])


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_standardized_input_passthrough():
    rng = np.random.default_rng(11)
    d = rng.standard_normal((4, 6, 6, 3))
    d = (d - d.mean(axis=(0, 1, 2))) / d.std(axis=(0, 1, 2))
    x = Tensor(d, dtype=np.float64)
    gamma = Tensor(np.ones(3), dtype=np.float64)
    beta = Tensor(np.zeros(3), dtype=np.float64)
    out = ops.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), "train", eps=1e-5)
    # unit variance in, so output is x scaled by sqrt(1 / (1 + eps))
    assert np.allclose(out.data, d * np.sqrt(1.0 / (1.0 + 1e-5)), atol=1e-10)


def test_batch_norm_zero_gamma_gives_beta():
    x = rand((2, 4, 4, 3), seed=12)
    gamma = Tensor(np.zeros(3, dtype=np.float32))
    beta = Tensor(np.array([1.0, -2.0, 0.5], dtype=np.float32))
    out = ops.batch_norm(x, gamma, beta, np.zeros(3, np.float32), np.ones(3, np.float32), "train")
    assert np.array_equal(out.data, np.broadcast_to(beta.data, out.shape))


def test_batch_norm_running_stats_update_and_eval():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((2, 4, 4, 2)) * 3.0 + 1.0, dtype=np.float64)
    gamma = Tensor(np.ones(2), dtype=np.float64)
    beta = Tensor(np.zeros(2), dtype=np.float64)
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(x, gamma, beta, rm, rv, "train", momentum=0.9)
    mean = x.data.mean(axis=(0, 1, 2))
    var = x.data.var(axis=(0, 1, 2))
    assert np.allclose(rm, 0.1 * mean)
    assert np.allclose(rv, 0.9 + 0.1 * var)
    out = ops.batch_norm(x, gamma, beta, rm, rv, "eval")
    assert np.allclose(out.data, (x.data - rm) / np.sqrt(rv + 1e-5))


def test_batch_norm_single_value_train_rejected():
    x = rand((1, 1, 1, 2))
    g = Tensor(np.ones(2, np.float32))
    b = Tensor(np.zeros(2, np.float32))
    with pytest.raises(ShapeError):
        ops.batch_norm(x, g, b, np.zeros(2, np.float32), np.ones(2, np.float32), "train")


# ---------------------------------------------------------------------------
# elementwise


def test_activation_examples():
    assert float(ops.sigmoid(Tensor(np.zeros(()))).data) == 0.5
    x = Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32))
    assert ops.relu(x).data.tolist() == [0.0, 0.0, 2.0]


def test_mul_broadcast_identity_with_ones():
    x = rand((2, 3, 3, 4))
    ones = Tensor(np.ones((2, 3, 3, 1), dtype=np.float32))
    assert np.array_equal(ops.mul_broadcast(x, ones).data, x.data)


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
                min_size=1, max_size=32))
@settings(max_examples=50, deadline=None)
def test_sigmoid_strictly_inside_unit_interval(values):
    out = ops.sigmoid(Tensor(np.array(values, dtype=np.float32))).data
    assert np.all(out > 0.0) and np.all(out < 1.0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_forward_ops_finite_on_finite_inputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor((rng.standard_normal((1, 4, 4, 3)) * 50).astype(np.float32))
    k = Tensor((rng.standard_normal((3, 3, 3, 2)) * 50).astype(np.float32))
    outs = [
        ops.conv2d(x, k),
        ops.relu(x),
        ops.sigmoid(x),
        ops.maxpool2d(x),
        ops.channel_avg(x),
        ops.channel_max(x),
    ]
    for out in outs:
        assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# backward machinery


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)),
               requires_grad=True, dtype=np.float64)
    backward(ops.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square_gives_identity():
    x = Tensor(np.random.default_rng(1).standard_normal((5,)),
               requires_grad=True, dtype=np.float64)
    backward(ops.scale(ops.sum_all(ops.mul(x, x)), 0.5))
    assert np.allclose(x.grad, x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.relu(x))


def test_gradient_accumulation_doubles():
    x = Tensor(np.random.default_rng(2).standard_normal((4,)),
               requires_grad=True, dtype=np.float64)
    backward(ops.sum_all(ops.add(x, x)))
    doubled = x.grad.copy()
    x.grad = None
    backward(ops.sum_all(x))
    assert np.array_equal(doubled, 2.0 * x.grad)


def test_unreachable_grads_untouched():
    x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    y = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    y.grad = np.full(3, 7.0)
    backward(ops.sum_all(x))
    assert np.array_equal(y.grad, np.full(3, 7.0))


def test_no_grad_blocks_recording():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    with no_grad():
        out = ops.relu(x)
    assert not out.requires_grad
    out2 = ops.relu(x)
    assert out2.requires_grad
