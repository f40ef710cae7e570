import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthct import gradsuite
from synthct import tensor as T
from synthct.tensor import NonFiniteError, ShapeError, Tensor, UsageError, grad_check, grad_check64, precision


def naive_conv3d(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, d, h, wd = x.shape
    k, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od = (d + 2 * pad - kd) // stride + 1
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, od, oh, ow))
    for i in range(n):
        for f in range(k):
            for z in range(od):
                for y in range(oh):
                    for q in range(ow):
                        patch = xp[i, :, z * stride:z * stride + kd, y * stride:y * stride + kh, q * stride:q * stride + kw]
                        out[i, f, z, y, q] = (patch * w[f]).sum() + (0.0 if b is None else b[f])
    return out


# --- elementwise values ---------------------------------------------------------

def test_silu_zero():
    assert T.silu(Tensor([0.0])).data[0] == 0.0


def test_abs_backward_sign():
    x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    T.sum(T.abs(x)).backward()
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_relu_subgradient_zero_at_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    T.sum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_shape_mismatch_lists_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_scalar_broadcast_allowed():
    out = T.add(Tensor(np.ones((2, 2))), 3.0)
    np.testing.assert_array_equal(out.data, np.full((2, 2), 4.0))


# --- backward semantics ------------------------------------------------------------

def test_sum_grad_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_sum_of_squares_grad():
    x = Tensor([3.0], requires_grad=True)
    T.sum(x * x).backward()
    assert x.grad[0] == 6.0


def test_repeated_backward_is_usage_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(x * x)
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


def test_non_scalar_root_is_usage_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        (x * x).backward()


def test_detached_root_is_usage_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        T.sum(x).detach().backward()


def test_gradients_accumulate_additively(rng):
    with precision(np.float64):
        data = rng.standard_normal(5)
        x = Tensor(data.copy(), requires_grad=True)
        T.sum(T.exp(x)).backward()
        g1 = x.grad.copy()
        x.grad = None
        T.sum(T.mul(x, x)).backward()
        g2 = x.grad.copy()
        x.grad = None
        T.add(T.sum(T.exp(x)), T.sum(T.mul(x, x))).backward()
        np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-12)
        # two separate backward passes into the same leaf also sum
        x.grad = None
        T.sum(T.exp(x)).backward()
        T.sum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-12)


def test_shared_node_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    T.sum(y + y).backward()
    assert x.grad[0] == 8.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_names_op():
    x = Tensor([-1.0])
    with pytest.raises(NonFiniteError, match="log"):
        T.log(x)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


def test_default_dtype_and_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((1, 2, 6, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    a = T.conv3d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv3d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# --- convolution -----------------------------------------------------------------

@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv3d_matches_naive_loop_64bit(rng, stride, pad):
    x = rng.standard_normal((2, 2, 5, 6, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    with precision(np.float64):
        out = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    ref = naive_conv3d(x, w, b, stride, pad)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_conv3d_matches_naive_loop_32bit(rng):
    x = rng.standard_normal((1, 2, 6, 5, 4)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32)
    out = T.conv3d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(out, naive_conv3d(x.astype(np.float64), w.astype(np.float64), None, 1, 1),
                               rtol=0, atol=1e-5)


def test_conv3d_output_size_formula():
    x = Tensor(np.zeros((1, 1, 9, 8, 7)))
    w = Tensor(np.zeros((1, 1, 3, 3, 3)))
    assert T.conv3d(x, w, stride=2, padding=1).shape == (1, 1, 5, 4, 4)


def test_conv3d_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 4, 4, 4)).astype(np.float32)
    out = T.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1))).data
    np.testing.assert_array_equal(out, x)


def test_conv3d_averaging_keeps_constant_interior():
    x = Tensor(np.full((1, 1, 5, 5, 5), 7.0))
    w = Tensor(np.full((1, 1, 3, 3, 3), 1.0 / 27))
    out = T.conv3d(x, w, padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1, 1:-1], 7.0, rtol=1e-6)


def test_conv3d_shape_errors():
    with pytest.raises(ShapeError):
        T.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


def test_conv3d_gradients_fd():
    def build():
        r = np.random.default_rng(4)
        x = Tensor(r.standard_normal((1, 2, 4, 4, 4)), requires_grad=True)
        w = Tensor(r.standard_normal((2, 2, 3, 3, 3)), requires_grad=True)
        b = Tensor(r.standard_normal(2), requires_grad=True)
        c = r.standard_normal((1, 2, 4, 4, 4))
        return (lambda x_, w_, b_: T.sum(T.mul(T.conv3d(x_, w_, b_, padding=1), Tensor(c)))), [x, w, b]

    assert grad_check64(build, eps=1e-6).max_rel_error < 1e-4


# --- normalization and resizing -------------------------------------------------------------

def test_instance_norm_two_voxels():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 1, 2))
    out = T.instance_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1))).data.ravel()
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)


def test_instance_norm_group_mean_is_offset(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 4)) * 5 + 2)
    offset = rng.standard_normal(3)
    out = T.instance_norm(x, Tensor(rng.uniform(0.5, 2, 3)), Tensor(offset)).data
    np.testing.assert_allclose(out.mean(axis=(2, 3, 4)), np.broadcast_to(offset, (2, 3)), atol=1e-4)


def test_upsample_constant_and_backward_counts():
    x = Tensor(np.full((1, 1, 2, 2, 2), 5.0), requires_grad=True)
    y = T.upsample_nearest(x, 2)
    assert y.shape == (1, 1, 4, 4, 4)
    np.testing.assert_array_equal(y.data, 5.0)
    T.sum(y).backward()
    np.testing.assert_array_equal(x.grad, 8.0)


def test_down_then_up_gradient():
    def build():
        r = np.random.default_rng(2)
        x = Tensor(r.standard_normal((1, 1, 4, 4, 4)), requires_grad=True)
        w = Tensor(r.standard_normal((2, 1, 2, 2, 2)), requires_grad=True)
        c = r.standard_normal((1, 2, 4, 4, 4))
        return (lambda x_, w_: T.sum(T.mul(T.upsample_nearest(T.conv3d(x_, w_, stride=2), 2), Tensor(c)))), [x, w]

    assert grad_check64(build, eps=1e-6).max_rel_error < 1e-4


# --- grad_check harness ------------------------------------------------------------------

def test_grad_check_linear_is_exact():
    def build():
        x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        c = Tensor(np.array([1.5, -2.0, 0.25]))
        return (lambda a: T.sum(T.mul(a, c))), [x]

    assert grad_check64(build).max_rel_error < 1e-9


def test_grad_check_excludes_abs_kink():
    def build():
        x = Tensor(np.array([0.0, 1.0, -2.0]), requires_grad=True)
        return (lambda a: T.sum(T.abs(a))), [x]

    res = grad_check64(build, skip_near_zero=True)
    assert res.skipped == 1 and res.checked == 2
    assert res.max_rel_error < 1e-9


def test_three_op_chain_fd(rng):
    def build():
        x = Tensor(np.random.default_rng(0).standard_normal(6), requires_grad=True)
        return (lambda a: T.sum(T.sigmoid(T.mul(T.exp(a), a)))), [x]

    assert grad_check64(build, eps=1e-6).max_rel_error < 1e-4


@pytest.mark.parametrize("name", sorted(gradsuite._op_cases()))
def test_every_op_passes_fd(name):
    outcome = gradsuite.run_check(f"op/{name}")
    assert outcome.max_rel_error < 1e-4, outcome.line()


@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4), st.integers(0, 2**31 - 1))
def test_elementwise_chain_property(rows, cols, seed):
    def build():
        r = np.random.default_rng(seed)
        a = Tensor(r.standard_normal((rows, cols)), requires_grad=True)
        b = Tensor(r.standard_normal((rows, cols)), requires_grad=True)
        return (lambda x, y: T.sum(T.mul(T.silu(T.add(x, y)), T.softplus(T.sub(x, y))))), [a, b]

    assert grad_check64(build, eps=1e-6).max_rel_error < 1e-4


def test_grad_check_rejects_wrong_gradient():
    """The harness itself detects a deliberately broken backward rule."""
    from synthct.tensor.core import make_result

    def bad_square(a):
        return make_result(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")

    with precision(np.float64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        res = grad_check(lambda t: T.sum(bad_square(t)), [x], eps=1e-6)
    assert res.max_rel_error > 0.4
