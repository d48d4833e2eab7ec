import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colgeo import tensor as T
from colgeo.gradcheck import grad_check
from colgeo.tensor import ShapeError, Tensor

floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---- conv2d -------------------------------------------------------------
def test_identity_kernel_returns_input(rng):
    x = rng.normal(size=(1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_disjoint_window_sums():
    out = T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))


def test_conv_kernel_gradient_matches_fine_central_difference(rng):
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    res = grad_check(lambda t: T.conv2d(Tensor(x), t, padding=1).sum(), k, step=1e-5, method="central")
    assert res.max_error < 1e-6


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=2, dilation=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    ho, wo = out.shape[-2:]
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, 2 * i : 2 * i + 5 : 2, 2 * j : 2 * j + 5 : 2]
                    ref[n, o, i, j] = np.sum(patch * k[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_is_rejected(rng):
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(1, 3, 3, 3))))


# ---- elementwise ----------------------------------------------------------
def test_scalar_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.relu(Tensor(-2.5)).item() == 0.0


def test_sigmoid_derivative_at_one():
    assert grad_check(lambda t: T.sigmoid(t).sum(), np.array([1.0])).max_error < 1e-8


@pytest.mark.parametrize("op", [T.log, T.sqrt])
def test_nonpositive_input_rejected(op):
    with pytest.raises(ValueError):
        op(Tensor(np.array([1.0, 0.0])))


def test_broadcast_add():
    np.testing.assert_array_equal((Tensor([1.0, 2.0, 3.0]) + Tensor([10.0])).data, [11, 12, 13])


def test_ones_attention_is_identity(rng):
    f = rng.normal(size=(2, 3, 3))
    np.testing.assert_array_equal((Tensor(f) * Tensor(np.ones_like(f))).data, f)


@given(arrays(np.float64, (2, 3), elements=floats), arrays(np.float64, (3,), elements=floats))
def test_product_rule_with_broadcast(a, b):
    ta = leaf(a)
    (ta * Tensor(b)).sum().backward()
    np.testing.assert_array_equal(ta.grad, np.broadcast_to(b, a.shape))


def test_incompatible_shapes_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


# ---- reductions -----------------------------------------------------------
def test_mean_value_and_gradient():
    x = leaf([2.0, 4.0, 6.0])
    m = x.mean()
    assert m.item() == 4.0
    m.backward()
    np.testing.assert_allclose(x.grad, np.full(3, 1 / 3))


def test_spatial_max_tie_goes_to_first_index():
    x = leaf([[[1.0, 3.0], [3.0, 0.0]]])
    out = T.spatial_max(x)
    assert out.data.ravel()[0] == 3.0
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[0.0, 1.0], [0.0, 0.0]]])


# ---- resize / concat ------------------------------------------------------
def test_resize_identity_and_nearest_blocks():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(T.resize(Tensor(x), 1).data, x)
    up = T.resize(Tensor(x), 2, "nearest").data[0]
    np.testing.assert_array_equal(up, np.kron(x[0], np.ones((2, 2))))


def test_bilinear_gradient(rng):
    res = grad_check(lambda t: (T.resize(t, 2, "bilinear") * np.arange(48.0).reshape(1, 6, 8)).sum(),
                     rng.normal(size=(1, 3, 4)), step=1e-5, method="central")
    assert res.max_error < 1e-6


def test_concat_shapes_and_gradient_split(rng):
    parts = [leaf(rng.normal(size=(1, 4, 4))) for _ in range(4)]
    out = T.concat(parts, 0)
    assert out.shape == (4, 4, 4)
    w = rng.normal(size=(4, 4, 4))
    (out * w).sum().backward()
    for i, p in enumerate(parts):
        np.testing.assert_array_equal(p.grad, w[i : i + 1])
    with pytest.raises(ValueError):
        T.concat([], 0)


# ---- backward engine ------------------------------------------------------
def test_backward_of_sum_and_mean_square(rng):
    x = leaf(rng.normal(size=(3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    y = leaf(rng.normal(size=(3, 4)))
    (y * y).mean().backward()
    np.testing.assert_allclose(y.grad, 2 * y.data / 12, rtol=1e-15)


def test_reused_tensor_accumulates_once_per_backward(rng):
    x = leaf(rng.normal(size=3))
    (x * 2.0 + x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 5.0))


def test_grad_shape_matches_data(rng):
    x = leaf(rng.normal(size=(2, 3, 5, 5)))
    T.conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3))), padding=1).mean().backward()
    assert x.grad.shape == x.shape


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng.normal(size=3))
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_weighted_sum_rounds_once():
    out = T.weighted_sum([Tensor(2.0), Tensor(1.0), Tensor(0.5)], [0.5, 0.3, 0.2])
    assert out.item() == 1.4


@given(arrays(np.float64, st.integers(1, 6), elements=floats))
def test_sum_gradient_is_ones(x):
    t = leaf(x)
    t.sum().backward()
    assert np.all(t.grad == 1.0)
