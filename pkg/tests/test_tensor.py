import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdunet import functional as F
from mdunet.gradcheck import OP_CASES, check_op, numeric_gradient, relative_error
from mdunet.tensor import Parameter, Tensor, backward, no_grad, topological_order


def conv_loops(x, k, b=None, dilation=(1, 1)):
    """Direct definition: zero-padded cross-correlation, one output pixel at a time."""
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    dh, dw = dilation
    ph, pw = (kh - 1) * dh // 2, (kw - 1) * dw // 2
    out = np.zeros((B, O, H, W))
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i + u * dh - ph, j + v * dw - pw
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += x[n, c, y, xx] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def test_backward_accumulates_through_shared_use():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = F.sum(F.add(F.mul(x, x), x))
    backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(F.mul(x, 2.0))


def test_leaf_gradients_accumulate_across_calls():
    p = Parameter(np.array([2.0]))
    for _ in range(2):
        backward(F.sum(F.mul(p, 3.0)))
    np.testing.assert_allclose(p.grad, [6.0])
    p.zero_grad()
    assert p.grad is None


def test_no_grad_records_no_graph():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = F.relu(x)
    assert y.parents == () and not y.requires_grad


def test_topological_order_visits_parents_first():
    a = Tensor(np.ones(2), requires_grad=True)
    b = F.mul(a, 2.0)
    c = F.add(b, a)
    order = topological_order(F.sum(c))
    pos = {id(t): i for i, t in enumerate(order)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)]


def test_broadcast_gradient_is_reduced_to_operand_shape():
    a = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(np.full((1, 3, 1, 1), 2.0), requires_grad=True)
    backward(F.sum(F.mul(a, b)))
    assert b.grad.shape == (1, 3, 1, 1)
    np.testing.assert_allclose(b.grad, np.full((1, 3, 1, 1), 32.0))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(3, 6),
    st.integers(3, 6),
    st.sampled_from([(1, 1), (3, 3), (1, 3), (3, 1), (5, 5)]),
    st.sampled_from([(1, 1), (2, 2), (1, 2), (4, 1)]),
    st.integers(0, 2**16),
)
def test_conv2d_matches_direct_loops(b, c, h, w, kernel, dil, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c, h, w))
    k = rng.standard_normal((2, c) + kernel)
    bias = rng.standard_normal(2)
    got = F.conv2d(Tensor(x), Tensor(k), Tensor(bias), dilation=dil).data
    np.testing.assert_allclose(got, conv_loops(x, k, bias, dil), atol=1e-12)


def test_conv2d_same_padding_keeps_extent():
    x = Tensor(np.ones((1, 1, 5, 7)))
    y = F.conv2d(x, Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 5, 7)
    # corner sees 4 taps, centre sees 9
    assert y.data[0, 0, 0, 0] == 4 and y.data[0, 0, 2, 3] == 9


def test_conv2d_errors_name_shapes():
    x = Tensor(np.ones((1, 3, 4, 4)))
    with pytest.raises(ValueError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
        F.conv2d(x, Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(ValueError, match="even"):
        F.conv2d(x, Tensor(np.ones((2, 3, 2, 2))))


def test_maxpool_matches_blockwise_max():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 4))
    want = x.reshape(2, 3, 3, 2, 2, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(F.maxpool2d(Tensor(x)).data, want)


def test_maxpool_tie_sends_gradient_to_one_position():
    x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    backward(F.sum(F.maxpool2d(x)))
    assert x.grad.sum() == 1.0 and x.grad[0, 0, 0, 0] == 1.0


def test_pooling_rejects_odd_extent():
    with pytest.raises(ValueError):
        F.maxpool2d(Tensor(np.ones((1, 1, 3, 4))))
    with pytest.raises(ValueError):
        F.avgpool2d(Tensor(np.ones((1, 1, 4, 5))))


def test_upsample_is_nearest_neighbour():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    y = F.upsample2x(Tensor(x)).data
    np.testing.assert_array_equal(y[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).standard_normal((2, 3, 2, 2)) * 5
    p = F.softmax_channels(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(F.softmax_channels(Tensor(x + shift)).data, p, atol=1e-12)


def test_batchnorm_training_normalises_and_updates_running_stats():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    y = F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5), rtol=1e-10)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_eval_uses_running_stats():
    x = np.full((1, 1, 2, 2), 3.0)
    y = F.batchnorm2d(Tensor(x), Tensor(np.array([2.0])), Tensor(np.array([1.0])), np.array([1.0]), np.array([4.0]), training=False)
    np.testing.assert_allclose(y.data, 2.0 * 2.0 / np.sqrt(4.0 + 1e-5) + 1.0)


def test_concat_and_add_n_diagnostics_name_the_input():
    a = Tensor(np.ones((1, 2, 4, 4)))
    b = Tensor(np.ones((1, 2, 2, 2)))
    with pytest.raises(ValueError, match="1"):
        F.concat([a, b])
    with pytest.raises(ValueError, match="1"):
        F.add_n([a, b])


def test_split_inverts_concat():
    x = np.random.default_rng(1).standard_normal((1, 5, 2, 2))
    parts = F.split(Tensor(x), [2, 3])
    np.testing.assert_array_equal(F.concat(parts).data, x)


def test_numeric_gradient_of_a_quadratic():
    a = np.array([1.0, -2.0, 0.5])
    num = numeric_gradient(lambda: float((a**2).sum()), a)
    np.testing.assert_allclose(num, 2 * a, atol=1e-8)
    assert relative_error(num, 2 * a) < 1e-8


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    assert check_op(name, instances=5, seed=7).passed
