import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvc3d import ops, oracles
from mvc3d.ops import PoolSpec
from mvc3d.tensor import ShapeError, Tape, Tensor, backward, finite_diff_check, reduce_sum

rng = np.random.default_rng(0)


def weighted_sum(t, g):
    return reduce_sum(t * Tensor(g))


def grads(f, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*ts)
    backward(tape, out)
    return [t.grad for t in ts]


# --- conv3d -----------------------------------------------------------------


def test_conv3d_identity_kernel_plus_bias():
    x = rng.normal(size=(2, 4, 5, 5))
    w = np.zeros((2, 2, 1, 3, 3))
    w[0, 0, 0, 1, 1] = w[1, 1, 0, 1, 1] = 1.0
    b = np.array([0.5, -1.0])
    out = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, x + b[:, None, None, None], atol=1e-15)


def test_conv3d_matches_direct_oracle_on_spec_case():
    x = rng.normal(size=(2, 4, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    out = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.abs(out - oracles.conv3d_direct(x, w, b)).max() < 1e-10


def test_conv3d_zero_input_gives_bias():
    b = np.array([1.0, 2.0, 3.0])
    out = ops.conv3d(Tensor(np.zeros((2, 3, 4, 4))), Tensor(rng.normal(size=(3, 2, 3, 3, 3))), Tensor(b)).data
    np.testing.assert_array_equal(out, np.broadcast_to(b[:, None, None, None], out.shape))


def test_conv3d_same_padding_preserves_extents():
    for kv in (1, 3, 5, 7):
        out = ops.conv3d(Tensor(np.ones((1, 2, 6, 7, 5))), Tensor(np.ones((4, 2, kv, 3, 3))))
        assert out.shape == (1, 4, 6, 7, 5)


def test_conv3d_errors():
    with pytest.raises(ValueError, match="odd"):
        ops.conv3d(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones((1, 2, 2, 3, 3))))
    with pytest.raises(ShapeError, match="channels"):
        ops.conv3d(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones((1, 3, 3, 3, 3))))


def test_conv3d_backward_zero_weights():
    x = rng.normal(size=(2, 3, 4, 5))
    gx, gw, gb = grads(lambda a, w, b: reduce_sum(ops.conv3d(a, w, b)), x, np.zeros((4, 2, 3, 3, 3)), np.zeros(4))
    np.testing.assert_array_equal(gx, 0.0)
    np.testing.assert_array_equal(gb, np.full(4, 3 * 4 * 5))


def test_conv3d_backward_finite_differences():
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    b = rng.normal(size=2)
    up = rng.normal(size=(2, 3, 4, 4))
    assert finite_diff_check(lambda t: weighted_sum(ops.conv3d(t, Tensor(w), Tensor(b)), up), Tensor(x)) < 1e-4
    assert finite_diff_check(lambda t: weighted_sum(ops.conv3d(Tensor(x), t, Tensor(b)), up), Tensor(w)) < 1e-4
    assert finite_diff_check(lambda t: weighted_sum(ops.conv3d(Tensor(x), Tensor(w), t), up), Tensor(b)) < 1e-4


def test_conv3d_v1_view_shift_shifts_input_gradient():
    x = rng.normal(size=(2, 5, 4, 4))
    w = rng.normal(size=(3, 2, 1, 3, 3))
    up = rng.normal(size=(3, 5, 4, 4))
    up_shift = np.zeros_like(up)
    up_shift[:, 1:] = up[:, :-1]
    (g,) = grads(lambda t: weighted_sum(ops.conv3d(t, Tensor(w)), up), x)
    (g_shift,) = grads(lambda t: weighted_sum(ops.conv3d(t, Tensor(w)), up_shift), x)
    np.testing.assert_allclose(g_shift[:, 1:], g[:, :-1], atol=1e-12)
    np.testing.assert_array_equal(g_shift[:, 0], 0.0)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
    st.sampled_from([1, 3, 5]), st.integers(0, 2**31),
)
def test_conv3d_oracle_property(c_in, c_out, V, H, W, kv, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(c_in, V, H, W))
    w = r.normal(size=(c_out, c_in, kv, 3, 3))
    b = r.normal(size=c_out)
    out = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.abs(out - oracles.conv3d_direct(x, w, b)).max() < 1e-10


# --- conv2d_independent --------------------------------------------------------


def test_independent2d_single_view_equals_conv3d_v1():
    x = rng.normal(size=(2, 1, 5, 5))
    w = rng.normal(size=(3, 2, 1, 3, 3))
    b = rng.normal(size=3)
    a = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    c = ops.conv2d_independent(Tensor(x), Tensor(w[None, :, :, 0]), Tensor(b[None])).data
    np.testing.assert_allclose(a, c, atol=1e-12)


def test_independent2d_tied_weights_equal_conv3d_v1():
    x = rng.normal(size=(2, 2, 6, 5, 5))
    w = rng.normal(size=(4, 2, 1, 3, 3))
    b = rng.normal(size=4)
    tied = np.repeat(w[None, :, :, 0], 6, axis=0)
    a = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    c = ops.conv2d_independent(Tensor(x), Tensor(tied), Tensor(np.tile(b, (6, 1)))).data
    assert np.abs(a - c).max() <= 1e-12


def test_independent2d_locality():
    x = rng.normal(size=(2, 4, 5, 5))
    w = rng.normal(size=(4, 3, 2, 3, 3))
    base = ops.conv2d_independent(Tensor(x), Tensor(w)).data
    w2 = w.copy()
    w2[2] += 1.0
    moved = ops.conv2d_independent(Tensor(x), Tensor(w2)).data
    changed = [not np.array_equal(base[:, j], moved[:, j]) for j in range(4)]
    assert changed == [False, False, True, False]


def test_independent2d_kernel_count_error():
    with pytest.raises(ShapeError):
        ops.conv2d_independent(Tensor(np.ones((2, 4, 5, 5))), Tensor(np.ones((3, 3, 2, 3, 3))))


def test_independent2d_gradients():
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(3, 2, 2, 3, 3))
    b = rng.normal(size=(3, 2))
    up = rng.normal(size=(2, 3, 4, 4))
    assert finite_diff_check(lambda t: weighted_sum(ops.conv2d_independent(t, Tensor(w), Tensor(b)), up), Tensor(x)) < 1e-4
    assert finite_diff_check(lambda t: weighted_sum(ops.conv2d_independent(Tensor(x), Tensor(w), t), up), Tensor(b)) < 1e-4


# --- maxpool ---------------------------------------------------------------------


def test_pool5_spatial_ceil():
    out, _ = ops.maxpool3d(Tensor(rng.normal(size=(1, 1, 7, 7))), PoolSpec((2, 2, 2), (2, 2, 2)))
    assert out.shape == (1, 1, 4, 4)


def test_view_extents_through_pools_2_to_5():
    extents = [12]
    for _ in range(4):
        extents.append(ops.pool_output_shape((extents[-1], 8, 8), PoolSpec())[0])
    assert extents[1:] == [6, 3, 1, 1]


def test_pool_view_kernel_truncated_when_short():
    x = rng.normal(size=(1, 1, 4, 4))
    out, _ = ops.maxpool3d(Tensor(x), PoolSpec())
    np.testing.assert_array_equal(out.data, oracles.maxpool_direct(x, (2, 2, 2), (2, 2, 2), (1, 2, 2)))


def test_pool_ties_route_to_one_element():
    x = np.ones((2, 4, 4, 4))
    (g,) = grads(lambda t: reduce_sum(ops.maxpool3d(t)[0]), x)
    assert g.sum() == 2 * 2 * 2 * 2
    # first element of each 2x2x2 window in scan order
    np.testing.assert_array_equal(g[:, ::2, ::2, ::2], 1.0)


def test_pool_gradient_conservation_and_argmax_positions():
    x = rng.normal(size=(3, 5, 7, 7))
    up = rng.normal(size=(3, 2, 4, 4))
    out, _ = ops.maxpool3d(Tensor(x))
    (g,) = grads(lambda t: weighted_sum(ops.maxpool3d(t)[0], up), x)
    assert np.isclose(g.sum(), up.sum())
    assert np.count_nonzero(g) == up.size
    np.testing.assert_array_equal(out.data, oracles.maxpool_direct(x, (2, 2, 2), (2, 2, 2), (2, 4, 4)))


def test_pool1_spec_keeps_views():
    out, _ = ops.maxpool3d(Tensor(np.ones((2, 12, 8, 8))), PoolSpec((1, 2, 2), (1, 2, 2)))
    assert out.shape == (2, 12, 4, 4)


def test_pool_spec_validation():
    with pytest.raises(ValueError):
        PoolSpec((0, 2, 2))
    with pytest.raises(ValueError):
        PoolSpec(viewpoint_rounding="nearest")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_pool_matches_oracle(V, H, W, seed):
    x = np.random.default_rng(seed).normal(size=(2, V, H, W))
    spec = PoolSpec()
    out, _ = ops.maxpool3d(Tensor(x), spec)
    shape = ops.pool_output_shape((V, H, W), spec)
    assert shape == (max(1, V // 2), -(-H // 2) if H > 1 else 1, -(-W // 2) if W > 1 else 1)
    np.testing.assert_array_equal(out.data, oracles.maxpool_direct(x, (2, 2, 2), (2, 2, 2), shape))


# --- dense layers, softmax, dropout ------------------------------------------------


def test_fully_connected_identity_and_hand_case():
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ops.fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = ops.fully_connected(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.5, 0.0]))
    np.testing.assert_array_equal(out.data, [[7.5, 10.0]])
    with pytest.raises(ShapeError):
        ops.fully_connected(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))


def test_fully_connected_gradients():
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    up = rng.normal(size=(3, 2))
    assert finite_diff_check(lambda t: weighted_sum(ops.fully_connected(t, Tensor(w), Tensor(b)), up), Tensor(x)) < 1e-4
    assert finite_diff_check(lambda t: weighted_sum(ops.fully_connected(Tensor(x), t, Tensor(b)), up), Tensor(w)) < 1e-4
    assert finite_diff_check(lambda t: weighted_sum(ops.fully_connected(Tensor(x), Tensor(w), t), up), Tensor(b)) < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros((2, 5)))).data, 0.2, atol=1e-15)
    np.testing.assert_allclose(ops.softmax(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)
    z = rng.normal(size=(3, 4))
    np.testing.assert_allclose(ops.softmax(Tensor(z + 7.5)).data, ops.softmax(Tensor(z)).data, atol=1e-15)
    with pytest.raises(ValueError):
        ops.softmax(Tensor([[0.0, np.nan]]))
    with pytest.raises(ShapeError):
        ops.softmax(Tensor([[1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.floats(0.1, 30), st.integers(0, 2**31))
def test_softmax_rows_are_distributions(B, k, spread, seed):
    p = ops.softmax(Tensor(np.random.default_rng(seed).normal(scale=spread, size=(B, k)))).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p >= 0).all() and (p <= 1).all()


def test_softmax_gradient():
    z, up = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert finite_diff_check(lambda t: weighted_sum(ops.softmax(t), up), Tensor(z)) < 1e-4


def test_cross_entropy_gradient_closed_form():
    z, y = rng.normal(size=(4, 3)), np.array([0, 2, 1, 1])
    (g,) = grads(lambda t: ops.cross_entropy(t, y), z)
    expected = ops.softmax(Tensor(z)).data - np.eye(3)[y]
    np.testing.assert_allclose(g, expected / 4, atol=1e-14)
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(z), [0, 1, 2, 3])


def test_dropout_identities_and_errors():
    x = Tensor(rng.normal(size=(4, 5)))
    assert ops.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert ops.dropout(x, 0.9, False) is x
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, True, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ops.dropout(x, 0.5, True)


def test_dropout_statistics():
    x = Tensor(np.ones(100_000))
    y = ops.dropout(x, 0.5, True, np.random.default_rng(1)).data
    assert abs((y > 0).mean() - 0.5) < 0.01
    assert abs(y.mean() - 1.0) < 0.02
