import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import conv2d_loops, distance_map_scan, log_softmax_ce, matvec_loops, max_pool_scan
from protopart import tensor as T
from protopart.exceptions import InvalidArgumentError, InvalidShapeError
from protopart.tensor import Tape, Tensor, finite_diff_grad, relative_error


def grad_of(fn, *inputs):
    leaves = [Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for v in inputs]
    with Tape() as tape:
        tape.backward(fn(*leaves))
    return [leaf.grad for leaf in leaves]


# ---------------------------------------------------------------- conv2d


def test_conv_scalar_product():
    out = T.conv2d(Tensor(np.full((1, 1, 1), 2.0)), Tensor(np.full((1, 1, 1, 1), 3.0)))
    assert out.values.tolist() == [[[6.0]]]


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))))
    assert out.shape == (1, 1, 1) and out.values[0, 0, 0] == 9.0


def test_conv_stride2_pad1_matches_loops(rng):
    x = rng.normal(size=(5, 5, 2))
    f = rng.normal(size=(3, 3, 2, 4))
    out = T.conv2d(Tensor(x), Tensor(f), stride=2, padding=1).values
    assert out.shape == (3, 3, 4)
    np.testing.assert_allclose(out, conv2d_loops(x, f, 2, 1), rtol=0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    k=st.integers(1, 3),
    stride=st.integers(1, 3),
    padding=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_loops_bounded_inputs(h, w, k, stride, padding, seed):
    r = np.random.default_rng(seed)
    x = r.uniform(-10, 10, size=(h, w, 2))
    f = r.uniform(-10, 10, size=(k, k, 2, 3))
    out = T.conv2d(Tensor(x), Tensor(f), stride=stride, padding=padding).values
    ref = conv2d_loops(x, f, stride, padding)
    assert np.max(np.abs(out - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_conv_batched_equals_per_image(rng):
    x = rng.normal(size=(3, 6, 6, 2))
    f = rng.normal(size=(3, 3, 2, 2))
    batched = T.conv2d(Tensor(x), Tensor(f), padding=1).values
    for i in range(3):
        np.testing.assert_array_equal(batched[i], T.conv2d(Tensor(x[i]), Tensor(f), padding=1).values)


@pytest.mark.parametrize("bad", [dict(stride=0), dict(padding=-1)])
def test_conv_rejects_bad_geometry(bad):
    with pytest.raises((InvalidArgumentError, InvalidShapeError)):
        T.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), **bad)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(InvalidShapeError):
        T.conv2d(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((3, 3, 1, 1))))


# ---------------------------------------------------------------- elementwise


def test_relu_values():
    assert T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).values.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_symmetry_point():
    assert T.sigmoid(Tensor(np.array([0.0]))).values.tolist() == [0.5]


def test_sigmoid_ln3():
    assert T.sigmoid(Tensor(np.array([math.log(3.0)]))).values[0] == pytest.approx(0.75, abs=1e-15)


def test_elementwise_dispatch_and_unknown_kind():
    x = Tensor(np.array([-2.0, 3.0]))
    np.testing.assert_array_equal(T.elementwise(x, "relu").values, [0.0, 3.0])
    with pytest.raises(InvalidArgumentError):
        T.elementwise(x, "tanh")


# ---------------------------------------------------------------- pooling


def test_global_pool():
    x = np.array([[1.0, 5.0], [3.0, 2.0]])[..., None]
    assert T.max_pool(Tensor(x), "global").values.ravel().tolist() == [5.0]


def test_window_pool_matches_scan(rng):
    grid = np.eye(4)[..., None] + 0.1 * rng.random((4, 4, 1))
    out = T.max_pool(Tensor(grid), "window", 2, 2).values
    np.testing.assert_array_equal(out, max_pool_scan(grid, 2, 2))


@pytest.mark.parametrize("size,stride", [(2, 2), (3, 1), (2, 1), (3, 2)])
def test_window_pool_random_matches_scan(rng, size, stride):
    x = rng.normal(size=(7, 6, 3))
    np.testing.assert_array_equal(T.max_pool(Tensor(x), "window", size, stride).values, max_pool_scan(x, size, stride))


def test_global_pool_constant_routes_to_first():
    (g,) = grad_of(lambda x: T.tsum(T.max_pool(x, "global")), np.full((3, 3, 1), 4.0))
    expected = np.zeros((3, 3, 1))
    expected[0, 0, 0] = 1.0
    np.testing.assert_array_equal(g, expected)


def test_global_pool_gradient_one_hot_per_channel(rng):
    (g,) = grad_of(lambda x: T.tsum(T.max_pool(x, "global")), rng.normal(size=(4, 5, 3)))
    assert (np.count_nonzero(g.reshape(-1, 3), axis=0) == 1).all()


# ---------------------------------------------------------------- linear / cross entropy


def test_linear_identity():
    assert T.linear(Tensor(np.array([2.5, -1.0])), Tensor(np.eye(2))).values.tolist() == [2.5, -1.0]


def test_linear_hand_value():
    assert T.linear(Tensor(np.array([2.0, 2.0])), Tensor(np.array([[1.0, -0.5]]))).values.tolist() == [1.0]


def test_linear_matches_loops(rng):
    w, x = rng.normal(size=(5, 7)), rng.normal(size=7)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w)).values, matvec_loops(w, x), atol=1e-12)


def test_cross_entropy_uniform():
    assert T.softmax_cross_entropy(Tensor(np.zeros(2)), 0).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_large_logits_are_stable():
    assert T.softmax_cross_entropy(Tensor(np.array([1000.0, 1000.0])), 1).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_hand_value():
    logits = [3.0, 1.0, 0.0]
    expected = -math.log(math.exp(3) / (math.exp(3) + math.e + 1))
    got = T.softmax_cross_entropy(Tensor(np.array(logits)), 0).item()
    assert got == pytest.approx(expected, abs=1e-14)
    assert got == pytest.approx(log_softmax_ce(logits, 0), abs=1e-14)


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(logits):
    assert abs(T.softmax(logits).sum() - 1.0) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InvalidArgumentError):
        T.softmax_cross_entropy(Tensor(np.zeros(3)), 3)


# ---------------------------------------------------------------- distances


def test_distance_zero_at_matching_patch(rng):
    z = rng.random((5, 5, 3))
    p = z[2:4, 1:3].copy()
    d = T.l2_distance_map(Tensor(z), Tensor(p)).values
    assert d[2, 1] == 0.0
    assert (np.delete(d.ravel(), 2 * 4 + 1) > 0).all()


def test_distance_hand_map():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])[..., None]
    d = T.l2_distance_map(Tensor(z), Tensor(np.ones((1, 1, 1)))).values
    assert d.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_distance_matches_patch_scan(rng):
    z, p = rng.random((6, 6, 3)), rng.random((1, 1, 3))
    np.testing.assert_allclose(T.l2_distance_map(Tensor(z), Tensor(p)).values, distance_map_scan(z, p), atol=1e-10)


@pytest.mark.parametrize("shape", [(1, 1), (2, 2), (3, 2)])
def test_distance_methods_agree(rng, shape):
    z = rng.random((2, 6, 5, 4))
    protos = rng.random((3,) + shape + (4,))
    direct = T.l2_distance_maps(Tensor(z), Tensor(protos), "direct").values
    expansion = T.l2_distance_maps(Tensor(z), Tensor(protos), "expansion").values
    assert np.max(np.abs(direct - expansion)) < 1e-8
    for j in range(3):
        np.testing.assert_allclose(direct[1, ..., j], distance_map_scan(z[1], protos[j]), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_distance_nonnegative_and_zero_iff_equal(seed):
    r = np.random.default_rng(seed)
    z = r.integers(0, 2, size=(4, 4, 2)).astype(float)
    p = r.integers(0, 2, size=(2, 2, 2)).astype(float)
    d = T.l2_distance_map(Tensor(z), Tensor(p)).values
    assert (d >= 0).all()
    for r_ in range(3):
        for c in range(3):
            assert (d[r_, c] == 0) == np.array_equal(z[r_ : r_ + 2, c : c + 2], p)


def test_distance_rejects_depth_mismatch():
    with pytest.raises(InvalidShapeError):
        T.l2_distance_map(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((1, 1, 3))))


# ---------------------------------------------------------------- backward


def test_backward_relu_sum():
    (g,) = grad_of(lambda x: T.tsum(T.relu(x)), [-1.0, 2.0])
    assert g.tolist() == [0.0, 1.0]


def test_backward_max_of_distance_routes_inside_window(rng):
    z = rng.random((5, 5, 2))
    p = rng.random((2, 2, 2))
    d = T.l2_distance_map(Tensor(z), Tensor(p)).values
    r, c = np.unravel_index(np.argmax(d), d.shape)
    (gz,) = grad_of(lambda zt: T.tsum(T.max_pool(T.reshape(T.l2_distance_map(zt, Tensor(p)), (4, 4, 1)), "global")), z)
    nonzero = np.argwhere(np.abs(gz).sum(axis=2) > 0)
    assert len(nonzero) > 0
    assert all(r <= i < r + 2 and c <= j < c + 2 for i, j in nonzero)


def test_composite_conv_sigmoid_ce_matches_fd(rng):
    x = rng.normal(size=(5, 5, 2))
    f = rng.normal(size=(3, 3, 2, 3)) * 0.5
    w = rng.normal(size=(4, 3))

    def loss(ft):
        h = T.sigmoid(T.conv2d(Tensor(x), ft, stride=2, padding=1))
        pooled = T.reshape(T.max_pool(h, "global"), (3,))
        return T.softmax_cross_entropy(T.linear(pooled, Tensor(w)), 2)

    (g,) = grad_of(loss, f)
    assert relative_error(g, finite_diff_grad(loss, f, 1e-5).values) < 1e-6


@pytest.mark.parametrize(
    "name,fn,shape",
    [
        ("add_bias", lambda x: T.tsum(T.square(T.add_bias(x, Tensor(np.arange(3.0))))), (2, 4, 3)),
        ("mean_square", lambda x: T.mean(T.square(x)), (3, 3)),
        ("multiply", lambda x: T.tsum(T.multiply(x, x)), (4,)),
        ("log_activation", lambda x: T.tsum(T.log_activation(T.square(x), 1e-4)), (5,)),
        ("reduce_min", lambda x: T.tsum(T.reduce_min(x, axis=(0, 1))), (3, 4, 2)),
        ("window_pool", lambda x: T.tsum(T.square(T.max_pool(x, "window", 2, 1))), (4, 4, 2)),
    ],
)
def test_elementary_gradients_match_fd(rng, name, fn, shape):
    x = rng.normal(size=shape)
    (g,) = grad_of(fn, x)
    assert relative_error(g, finite_diff_grad(fn, x).values) < 1e-6, name


def test_distance_gradients_match_fd(rng):
    z, p = rng.random((4, 5, 3)), rng.random((2, 2, 2, 3))
    gz, gp = grad_of(lambda a, b: T.tsum(T.log_activation(T.l2_distance_maps(a, b), 1e-4)), z, p)
    assert relative_error(gz, finite_diff_grad(lambda a: T.tsum(T.log_activation(T.l2_distance_maps(a, Tensor(p)), 1e-4)), z).values) < 1e-6
    assert relative_error(gp, finite_diff_grad(lambda b: T.tsum(T.log_activation(T.l2_distance_maps(Tensor(z), b), 1e-4)), p).values) < 1e-6


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
        with pytest.raises(InvalidArgumentError):
            tape.backward(y)


def test_tape_single_use_until_reset():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x)
        tape.backward(loss)
        with pytest.raises(InvalidArgumentError):
            tape.backward(loss)
        tape.reset()
        x.zero_grad()
        loss = T.tsum(T.scale(x, 3.0))
        tape.backward(loss)
    assert x.grad.tolist() == [3.0, 3.0]


def test_no_recording_without_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.tsum(x)
    assert y.tape_id is None
    with pytest.raises(InvalidArgumentError):
        T.backward(y)


def test_grad_accumulates_over_shared_use():
    (g,) = grad_of(lambda x: T.tsum(T.multiply(x, x)) + T.tsum(x), [1.0, -2.0])
    assert g.tolist() == [3.0, -3.0]


# ---------------------------------------------------------------- finite differences


def test_fd_of_sum_is_ones(rng):
    x = rng.normal(size=(3, 2))
    np.testing.assert_allclose(finite_diff_grad(lambda t: T.tsum(t), x).values, np.ones((3, 2)), atol=1e-9)


def test_fd_of_half_square_norm():
    g = finite_diff_grad(lambda t: 0.5 * float(np.sum(t.values**2)), np.array([3.0, -2.0])).values
    np.testing.assert_allclose(g, [3.0, -2.0], atol=1e-8)


def test_fd_rejects_nonpositive_step():
    with pytest.raises(InvalidArgumentError):
        finite_diff_grad(lambda t: T.tsum(t), np.ones(2), 0.0)


def test_relative_error_is_max_norm():
    assert relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
