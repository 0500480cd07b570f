import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plumemu import autodiff as ad
from plumemu.errors import DimensionError


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.abs(a), np.abs(n))
        assert np.all(np.abs(a - n) <= rtol * scale + atol), (a, n)


# conv2d ------------------------------------------------------------------------

def test_conv2d_zero_input():
    rng = np.random.default_rng(0)
    out = ad.conv2d(np.zeros((1, 3, 3)), rng.normal(size=(2, 1, 2, 2)), np.zeros(2))
    assert np.all(out.data == 0)


def test_conv2d_identity_kernel_is_exact():
    x = np.random.default_rng(1).normal(size=(1, 5, 7))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out.data, x)


def test_conv2d_hand_summed_windows():
    x = np.arange(1.0, 10.0).reshape(1, 3, 3)
    out = ad.conv2d(x, np.ones((1, 1, 2, 2)), np.zeros(1))
    np.testing.assert_array_equal(out.data, [[[12.0, 16.0], [24.0, 28.0]]])


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)]:
        got = ad.conv2d(x, w, b, stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - 3) // stride + 1
        wo = (6 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 2, 2)), np.zeros(1))


# conv2d_transpose ---------------------------------------------------------------

def test_conv_transpose_zero_and_scalar():
    out = ad.conv2d_transpose(np.zeros((2, 3, 3)), np.ones((2, 1, 3, 3)), np.zeros(1), 2, 1, 1)
    assert np.all(out.data == 0)
    out = ad.conv2d_transpose(np.full((1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.5), np.zeros(1))
    assert out.data.shape == (1, 1, 1) and out.data[0, 0, 0] == 7.5


def _conv_matrix(w, stride, pad, c, h, wd):
    """Materialise conv2d (no bias) as an explicit matrix by probing basis images."""
    cols = []
    for idx in range(c * h * wd):
        e = np.zeros(c * h * wd)
        e[idx] = 1.0
        cols.append(ad.conv2d(e.reshape(1, c, h, wd), w, np.zeros(w.shape[0]), stride, pad).data.ravel())
    return np.array(cols).T


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_transpose_is_jacobian_transpose(stride, pad):
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 2, 3, 3))
    A = _conv_matrix(w, stride, pad, 2, 4, 4)
    ho = (4 + 2 * pad - 3) // stride + 1
    y = rng.normal(size=(1, 3, ho, ho))
    op = (4 + 2 * pad - 3) % stride
    got = ad.conv2d_transpose(y, w, np.zeros(2), stride, pad, op).data
    assert got.shape == (1, 2, 4, 4)
    np.testing.assert_allclose(got.ravel(), A.T @ y.ravel(), atol=1e-12)


def test_conv_transpose_doubles_after_stride_two_conv():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 16, 16))
    h = ad.conv2d(x, rng.normal(size=(4, 1, 3, 3)), np.zeros(4), 2, 1)
    assert h.shape == (1, 4, 8, 8)
    up = ad.conv2d_transpose(h, rng.normal(size=(4, 1, 3, 3)), np.zeros(1), 2, 1, 1)
    assert up.shape == (1, 1, 16, 16)


# pooling and activations ------------------------------------------------------

def test_max_pool_values_and_ties():
    np.testing.assert_array_equal(ad.max_pool2d(np.full((1, 4, 4), 2.5), 2).data, np.full((1, 2, 2), 2.5))
    x = ad.parameter([[[1.0, 2.0], [3.0, 4.0]]])
    out = ad.max_pool2d(x, 2)
    assert out.data.tolist() == [[[4.0]]]
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[0.0, 0.0], [0.0, 1.0]]])
    # finite differences agree on the non-tied case
    arr = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    (num,) = numeric_grad(lambda: ad.max_pool2d(arr, 2).data.sum(), [arr])
    np.testing.assert_allclose(num, x.grad, atol=1e-9)
    t = ad.parameter(np.ones((1, 2, 2)))
    ad.max_pool2d(t, 2).sum().backward()
    np.testing.assert_array_equal(t.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_max_pool_requires_divisible_size():
    with pytest.raises(DimensionError):
        ad.max_pool2d(np.zeros((1, 5, 4)), 2)


def test_activations():
    assert ad.selu(np.array(0.0)).data == 0.0
    assert ad.leaky_relu(np.array(-1.0), 0.3).data == pytest.approx(-0.3)
    expected = ad.SELU_SCALE * ad.SELU_ALPHA * (np.exp(-1.0) - 1.0)
    assert ad.selu(np.array(-1.0)).data == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(-1.1113, abs=5e-5)


def test_dense():
    x = np.array([1.0, 1.0])
    np.testing.assert_array_equal(ad.dense(x, np.eye(2), np.zeros(2)).data, x)
    np.testing.assert_array_equal(ad.dense(x, np.zeros((2, 2)), np.array([5.0, -1.0])).data, [5.0, -1.0])
    np.testing.assert_array_equal(ad.dense(x, np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2)).data, [3.0, 7.0])
    with pytest.raises(DimensionError):
        ad.dense(np.ones(3), np.eye(2), np.zeros(2))


# backward ---------------------------------------------------------------------

def test_backward_trivial_cases():
    p = ad.parameter(np.ones(3))
    q = ad.parameter(np.ones((2, 2)))
    loss = p.sum() + q.sum()
    gp, gq = ad.grad(loss, [p, q])
    assert np.all(gp == 1) and np.all(gq == 1)
    const = ad.Tensor(4.0)
    gp, = ad.grad(const + ad.Tensor(1.0), [p])
    assert np.all(gp == 0)


def test_backward_rejects_non_scalar():
    p = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (p * 2.0).backward()


def test_graph_is_topological():
    p = ad.parameter(np.ones(3))
    y = ad.selu(p * 2.0) + p
    loss = ad.square(y).sum()
    g = ad.Graph.build(loss)
    for i, parents in enumerate(g.parents):
        assert all(j < i for j in parents)
    assert g.nodes[-1] is loss


def _tiny_net(rng):
    params = [
        ad.parameter(rng.normal(size=(3, 1, 3, 3)) * 0.5), ad.parameter(rng.normal(size=3) * 0.1),
        ad.parameter(rng.normal(size=(2, 12)) * 0.5), ad.parameter(rng.normal(size=2) * 0.1),
        ad.parameter(rng.normal(size=(12, 2)) * 0.5), ad.parameter(rng.normal(size=12) * 0.1),
        ad.parameter(rng.normal(size=(3, 1, 3, 3)) * 0.5), ad.parameter(rng.normal(size=1) * 0.1),
    ]
    x = rng.normal(size=(2, 1, 4, 4))

    def loss():
        h = ad.selu(ad.conv2d(x, params[0], params[1], 1, 1))
        h = ad.max_pool2d(h, 2)
        z = ad.leaky_relu(ad.dense(ad.flatten(h), params[2], params[3]), 0.3)
        d = ad.dense(z, params[4], params[5]).reshape(2, 3, 2, 2)
        out = ad.conv2d_transpose(d, params[6], params[7], 2, 1, 1)
        return (ad.square(out - x).sum() + ad.exp(z * 0.1).sum())

    return params, loss


def test_composite_network_matches_finite_differences():
    rng = np.random.default_rng(5)
    params, loss = _tiny_net(rng)
    analytic = ad.grad(loss(), params)
    numeric = numeric_grad(lambda: loss().item(), [p.data for p in params])
    assert_grads_close(analytic, numeric)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), layer=st.sampled_from(
    ["conv", "convT", "pool", "selu", "leaky", "dense"]))
def test_layer_gradients_property(seed, layer):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    if layer == "conv":
        x = rng.normal(size=(2, 2, 5, 5))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        fn = lambda x, w, b: ad.conv2d(x, w, b, stride, pad)  # noqa: E731
        arrays = [x, w, b]
    elif layer == "convT":
        x = rng.normal(size=(2, 3, 3, 3))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2)
        op = stride - 1
        fn = lambda x, w, b: ad.conv2d_transpose(x, w, b, stride, pad, op)  # noqa: E731
        arrays = [x, w, b]
    elif layer == "pool":
        arrays = [rng.normal(size=(2, 2, 4, 6))]
        fn = lambda x: ad.max_pool2d(x, 2)  # noqa: E731
    elif layer == "selu":
        arrays = [rng.normal(size=(3, 4))]
        fn = ad.selu
    elif layer == "leaky":
        arrays = [rng.normal(size=(3, 4))]
        fn = lambda x: ad.leaky_relu(x, 0.3)  # noqa: E731
    else:
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)]
        fn = ad.dense
    weights = None

    def scalar():
        nonlocal weights
        out = fn(*arrays).data
        if weights is None:
            weights = rng.normal(size=out.shape)
        return float(np.sum(out * weights))

    scalar()
    tensors = [ad.parameter(a) for a in arrays]
    analytic = ad.grad((fn(*tensors) * weights).sum(), tensors)
    numeric = numeric_grad(scalar, arrays)
    assert_grads_close(analytic, numeric)
    assert all(np.all(np.isfinite(a)) for a in analytic)


# Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    state = ad.AdamState.for_params(p)
    new, state2 = ad.adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(new[0], p[0])
    assert state2.step_count == state.step_count + 1


def test_adam_first_step_magnitude():
    new, state = ad.adam_step([np.array([1.0])], [np.array([2.0])],
                              ad.AdamState(learning_rate=1e-3, epsilon=1e-8))
    # bias-corrected first step: lr * g / (|g| + eps)
    assert new[0][0] == pytest.approx(1.0 - 1e-3 * 2.0 / (2.0 + 1e-8), rel=1e-14)
    assert new[0][0] == pytest.approx(0.999, abs=1e-9)
    assert state.first_moment[0].shape == (1,)


def test_adam_two_steps_decrease_quadratic():
    p = [np.array([3.0, -1.5])]
    state = ad.AdamState(learning_rate=0.1)
    f = lambda v: float(np.sum(v ** 2))  # noqa: E731
    values = [f(p[0])]
    for _ in range(2):
        p, state = ad.adam_step(p, [2 * p[0]], state)
        values.append(f(p[0]))
    assert values[0] > values[1] > values[2]
    assert state.step_count == 2
