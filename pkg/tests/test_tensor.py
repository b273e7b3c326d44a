import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dcae import tensor as T
from dcae.errors import DimensionError, IntegrityError
from dcae.layers import Linear

from oracles import conv2d_loops, dwconv3x3_loops, softmax_rows


def leaf(rng, *shape, scale=1.0):
    return T.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------- forward


def test_conv2d_all_ones_full_overlap():
    x = T.Tensor(np.ones((1, 1, 2, 2)))
    w = T.Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, T.Tensor(np.zeros(1)), stride=1, padding=1)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, 4.0)


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6))
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (1, 0, 3), (2, 3, 7)])
def test_conv2d_matches_loop_oracle(rng, stride, pad, k):
    x = rng.standard_normal((1, 3, 8, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, pad), atol=1e-5)


def test_conv_transpose_stamps_kernel_once():
    out = T.conv2d_transpose(T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_conv_transpose_zero_input_gives_bias(rng):
    b = rng.standard_normal(3)
    out = T.conv2d_transpose(
        T.Tensor(np.zeros((2, 4, 3, 3))), T.Tensor(rng.standard_normal((4, 3, 4, 4))), T.Tensor(b), 2, 1
    )
    np.testing.assert_array_equal(out.data, np.broadcast_to(b[None, :, None, None], out.shape))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (2, 0, 2), (1, 0, 5)])
def test_conv_transpose_is_adjoint_of_conv(rng, stride, pad, k):
    a = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((5, 3, k, k))
    fwd = T.conv2d(T.Tensor(a), T.Tensor(w), stride=stride, padding=pad)
    b = rng.standard_normal(fwd.shape)
    back = T.conv2d_transpose(T.Tensor(b), T.Tensor(w), stride=stride, padding=pad)
    # the transpose may drop trailing rows that no output window touched
    lhs = np.sum(fwd.data * b)
    rhs = np.sum(a[:, :, : back.shape[2], : back.shape[3]] * back.data)
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_conv_transpose_output_size():
    out = T.conv2d_transpose(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((2, 3, 4, 4))), stride=2, padding=1)
    assert out.shape == (1, 3, 8, 8)


def test_dwconv_delta_kernel_keeps_constant():
    w = np.zeros((2, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    out = T.dwconv3x3(T.Tensor(np.full((1, 2, 5, 5), 2.5)), T.Tensor(w), T.Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, 2.5)


def test_dwconv_channels_are_independent(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    x[:, 1] = 0.0
    b = np.array([0.3, -0.7])
    out = T.dwconv3x3(T.Tensor(x), T.Tensor(rng.standard_normal((2, 1, 3, 3))), T.Tensor(b))
    np.testing.assert_array_equal(out.data[:, 1], -0.7)


def test_dwconv_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((3, 1, 3, 3))
    b = rng.standard_normal(3)
    out = T.dwconv3x3(T.Tensor(x), T.Tensor(w), T.Tensor(b))
    np.testing.assert_allclose(out.data, dwconv3x3_loops(x, w, b), atol=1e-5)


def test_linear_hand_arithmetic():
    out = T.linear(T.Tensor(np.array([[1.0, 2.0]])), T.Tensor(np.eye(2)), T.Tensor(np.array([3.0, -3.0])))
    np.testing.assert_array_equal(out.data, [[4.0, -1.0]])


def test_linear_matches_matmul(rng):
    x, w, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data, x @ w + b, atol=1e-5)


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax_lastdim(T.Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    big = T.softmax_lastdim(T.Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-6)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_matches_wide_oracle_and_sums_to_one(a):
    out = T.softmax_lastdim(T.Tensor(a)).data
    np.testing.assert_allclose(out, softmax_rows(a), atol=1e-6)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_round_half_away_is_nearest_with_outward_ties(values):
    a = np.array(values)
    r = T.round_half_away(a)
    assert np.all(np.abs(a - r) <= 0.5)
    ties = np.abs(np.abs(a - np.trunc(a)) - 0.5) == 0
    assert np.all(np.abs(r[ties]) > np.abs(a[ties]))


def test_round_half_away_examples():
    np.testing.assert_array_equal(T.round_half_away(np.array([0.4, -1.6, 2.5, -0.5, -2.5])), [0, -2, 3, -1, -3])
    # just below a tie, and odd integers past 2**52, must not be nudged by 0.5 additions
    near = np.nextafter(0.5, 0.0)
    np.testing.assert_array_equal(T.round_half_away(np.array([near, -near])), [0, 0])
    assert T.round_half_away(np.array([2.0**52 + 1]))[0] == 2.0**52 + 1


def test_non_finite_output_raises():
    with pytest.raises(IntegrityError, match="log"):
        T.log(T.Tensor(np.array([-1.0])))


def test_shape_mismatch_raises(rng):
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(rng.standard_normal((1, 2, 4, 4))), T.Tensor(rng.standard_normal((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        T.dwconv3x3(T.Tensor(rng.standard_normal((1, 2, 4, 4))), T.Tensor(rng.standard_normal((3, 1, 3, 3))))


def test_backward_accumulates_through_shared_nodes():
    x = T.Tensor(np.array([3.0]), requires_grad=True)
    y = T.mul(x, x)
    T.sum_all(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_builds_no_graph():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad


# ---------------------------------------------------------------- gradients

KERNELS = {
    "add": lambda r: ((leaf(r, 2, 3), leaf(r, 1, 3)), T.add),
    "sub": lambda r: ((leaf(r, 2, 3), leaf(r, 2, 1)), T.sub),
    "mul": lambda r: ((leaf(r, 2, 3), leaf(r, 2, 3)), T.mul),
    "div": lambda r: ((leaf(r, 2, 3), T.Tensor(1.5 + r.random((2, 3)), requires_grad=True)), T.div),
    "square": lambda r: ((leaf(r, 4),), T.square),
    "absolute": lambda r: ((T.Tensor(np.array([0.5, -1.2, 2.0]), requires_grad=True),), T.absolute),
    "exp": lambda r: ((leaf(r, 4),), T.exp),
    "log": lambda r: ((T.Tensor(0.5 + r.random(4), requires_grad=True),), T.log),
    "clamp_min": lambda r: ((T.Tensor(np.array([-1.0, 0.3, 2.0]), requires_grad=True),), lambda x: T.clamp_min(x, 0.11)),
    "clamp": lambda r: ((T.Tensor(np.array([-1.0, 0.3, 2.0]), requires_grad=True),), lambda x: T.clamp(x, 0.0, 1.0)),
    "gelu": lambda r: ((leaf(r, 5),), T.gelu),
    "sigmoid": lambda r: ((leaf(r, 5),), T.sigmoid),
    "tanh": lambda r: ((leaf(r, 5),), T.tanh),
    "softplus": lambda r: ((leaf(r, 5, scale=3.0),), T.softplus),
    "normal_cdf": lambda r: ((leaf(r, 5),), T.normal_cdf),
    "softmax": lambda r: ((leaf(r, 3, 4),), T.softmax_lastdim),
    "reshape": lambda r: ((leaf(r, 2, 6),), lambda x: T.reshape(x, (3, 4))),
    "transpose": lambda r: ((leaf(r, 2, 3, 4),), lambda x: T.transpose(x, (2, 0, 1))),
    "concat": lambda r: ((leaf(r, 1, 2, 2, 2), leaf(r, 1, 3, 2, 2)), lambda a, b: T.concat([a, b], axis=1)),
    "channel_slice": lambda r: ((leaf(r, 1, 5, 2, 2),), lambda x: T.channel_slice(x, 1, 4)),
    "channel_mean": lambda r: ((leaf(r, 2, 3, 2, 2),), T.channel_mean),
    "channel_max": lambda r: ((leaf(r, 2, 3, 2, 2),), T.channel_max),
    "mean_all": lambda r: ((leaf(r, 3, 3),), T.mean_all),
    "matmul": lambda r: ((leaf(r, 2, 3, 4), leaf(r, 2, 4, 5)), T.matmul),
    "linear": lambda r: ((leaf(r, 6, 4), leaf(r, 4, 3), leaf(r, 3)), T.linear),
    "channel_linear": lambda r: ((leaf(r, 2, 4, 3, 3), leaf(r, 4, 3), leaf(r, 3)), T.channel_linear),
    "conv2d": lambda r: (
        (leaf(r, 2, 3, 7, 7), leaf(r, 4, 3, 4, 4), leaf(r, 4)),
        lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
    ),
    "conv2d_transpose": lambda r: (
        (leaf(r, 2, 3, 3, 3), leaf(r, 3, 2, 4, 4), leaf(r, 2)),
        lambda x, w, b: T.conv2d_transpose(x, w, b, stride=2, padding=1),
    ),
    "dwconv3x3": lambda r: ((leaf(r, 2, 3, 4, 5), leaf(r, 3, 1, 3, 3), leaf(r, 3)), T.dwconv3x3),
    "pad_edge": lambda r: ((leaf(r, 1, 2, 3, 4),), lambda x: T.pad_edge(x, 2)),
}


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernel_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    inputs, fn = KERNELS[name](rng)
    weights = T.Tensor(rng.standard_normal(fn(*inputs).shape))

    def loss():
        return T.sum_all(T.mul(fn(*inputs), weights))

    worst, per = T.grad_check(loss, {f"in{i}": t for i, t in enumerate(inputs)})
    assert worst <= 1e-5, per


def test_linear_layer_sum_loss_grad_check_tight(rng):
    layer = Linear(rng, 4, 3).astype(np.float64)
    x = leaf(rng, 5, 4)
    worst, _ = T.grad_check(lambda: T.sum_all(layer.rows(x)), {"x": x, **layer.named_parameters()})
    assert worst <= 1e-6


def test_constant_fragment_has_zero_input_gradient(rng):
    x = leaf(rng, 3)
    c = T.Tensor(rng.standard_normal(3))
    T.sum_all(T.add(T.mul(x, 0.0), c)).backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_grad_check_rejects_single_precision(rng):
    x = T.Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        T.grad_check(lambda: T.sum_all(x), {"x": x})


def test_grad_check_flags_non_finite_gradient_by_name():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def loss():
        out = T.sum_all(x)
        out._backward = lambda g: (np.array([np.inf, 0.0]),)
        return out

    with pytest.raises(IntegrityError, match="weights"):
        T.grad_check(loss, {"weights": x})


def test_ste_round_passes_gradient_straight_through():
    x = T.Tensor(np.array([0.2, 1.7, -2.5]), requires_grad=True)
    y = T.ste_round(x)
    np.testing.assert_array_equal(y.data, [0.0, 2.0, -3.0])
    T.sum_all(y).backward()
    np.testing.assert_array_equal(x.grad, 1.0)
