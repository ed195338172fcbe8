import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpa.autodiff import (
    Tensor,
    backward,
    bce_loss,
    conv2d,
    cosine_map,
    downsample_mask,
    fgbg_softmax,
    gradcheck,
    masked_average,
    relu,
    topo_order,
)

REL_TOL = 1e-4


def naive_conv(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def t(a, grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


# conv2d ------------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    y = conv2d(t(x), t(np.ones((1, 1, 1, 1))), t(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x)


def test_conv_hand_computed():
    y = conv2d(t([[[1, 2], [3, 4]]]), t([[[[1, 0], [0, 1]]]]), t([0.0]))
    assert y.data.tolist() == [[[5.0]]]


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(3, 7, 6))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    y = conv2d(t(x), t(w), t(b), stride, pad)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)
    assert y.shape == (2, (7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 3) // stride + 1)


def test_conv_batched_equals_single(rng):
    x = rng.normal(size=(3, 2, 8, 8))
    w, b = t(rng.normal(size=(4, 2, 3, 3))), t(rng.normal(size=4))
    batched = conv2d(t(x), w, b, 2, 1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d(t(x[i]), w, b, 2, 1).data, rtol=1e-12)


def test_conv_gradients_finite_differences(rng):
    x = t(rng.normal(size=(2, 4, 5, 5)))
    w = t(rng.normal(size=(3, 4, 3, 3)))
    b = t(rng.normal(size=3))
    errs = gradcheck(lambda: conv2d(x, w, b, 1, 1).sum(), [x, w, b])
    assert max(errs) < REL_TOL


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((1, 3, 3, 3))), t(np.zeros(1)))


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        conv2d(t(np.zeros((1, 2, 2))), t(np.zeros((1, 1, 3, 3))), t(np.zeros(1)))


# relu ---------------------------------------------------------------------------


def test_relu_values_and_zero_subgradient():
    x = t([-1.0, 0.0, 2.0])
    y = relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    backward(y.sum())
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative():
    x = t(-np.ones(5))
    y = relu(x)
    backward(y.sum())
    assert not y.data.any() and not x.grad.any()


def test_relu_finite_differences(rng):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    xt = t(x)
    g = rng.normal(size=x.shape)
    assert gradcheck(lambda: (relu(xt) * g).sum(), [xt])[0] < REL_TOL


# cosine map ---------------------------------------------------------------------


def test_cosine_self_similarity():
    p = np.array([1.0, -2.0, 0.5])
    f = np.repeat(p[:, None, None], 4, axis=1).repeat(3, axis=2)
    np.testing.assert_allclose(cosine_map(t(f), t(p)).data, np.ones((4, 3)), atol=1e-15)


def test_cosine_antiparallel():
    p = np.array([1.0, 2.0])
    f = np.zeros((2, 2, 2)) + p[:, None, None]
    f[:, 1, 0] = -p
    out = cosine_map(t(f), t(p)).data
    assert out[1, 0] == pytest.approx(-1.0, abs=1e-15)


def test_cosine_matches_scalar_oracle(rng):
    f = rng.normal(size=(4, 3, 3))
    p = rng.normal(size=4)
    out = cosine_map(t(f), t(p)).data
    for i in range(3):
        for j in range(3):
            v = f[:, i, j]
            assert out[i, j] == pytest.approx(v @ p / (np.linalg.norm(v) * np.linalg.norm(p)), abs=1e-10)


def test_cosine_channel_mismatch():
    with pytest.raises(ValueError):
        cosine_map(t(np.zeros((3, 2, 2))), t(np.ones(4)))


@given(st.integers(0, 10_000))
def test_cosine_bounded(seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(5, 4, 4)) * r.uniform(0, 100)
    f[:, 0, 0] = 0.0  # zero pixel hits the epsilon floor
    out = cosine_map(t(f), t(r.normal(size=5))).data
    assert np.all(out >= -1 - 1e-9) and np.all(out <= 1 + 1e-9)


# softmax / bce -------------------------------------------------------------------


def test_softmax_symmetric():
    s = t(np.full((3, 3), 0.3))
    np.testing.assert_allclose(fgbg_softmax(s, s, 20.0).data, 0.5)


def test_softmax_logistic_value():
    p = fgbg_softmax(t([[0.9]]), t([[0.1]]), 20.0).data[0, 0, 0]
    assert p == pytest.approx(1 / (1 + np.exp(-16.0)), rel=1e-14)
    assert p == pytest.approx(0.9999999, abs=1e-7)


@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_softmax_channels_sum_to_one(seed, temp):
    r = np.random.default_rng(seed)
    out = fgbg_softmax(t(r.uniform(-1, 1, (4, 4))), t(r.uniform(-1, 1, (4, 4))), temp).data
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError):
        fgbg_softmax(t([[0.0]]), t([[0.0]]), 0.0)


def test_bce_perfect_prediction():
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert bce_loss(t(m), m).item() <= -np.log(1 - 1e-7) + 1e-15


def test_bce_half():
    assert bce_loss(t(np.full((3, 3), 0.5)), np.eye(3)).item() == pytest.approx(np.log(2), rel=1e-12)


def test_bce_matches_summation_oracle(rng):
    p = rng.uniform(0.01, 0.99, size=(4, 5))
    y = rng.integers(0, 2, size=(4, 5)).astype(float)
    total = 0.0
    for pi, yi in zip(p.ravel(), y.ravel()):
        total += -(yi * np.log(pi) + (1 - yi) * np.log(1 - pi))
    assert bce_loss(t(p), y).item() == pytest.approx(total / p.size, abs=1e-10)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(t(np.full((2, 2), 0.5)), np.zeros((2, 3)))


# backward ------------------------------------------------------------------------


def test_backward_sum_and_square(rng):
    x = t(rng.normal(size=(3, 2)))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
    x.zero_grad()
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_across_calls(rng):
    x = t(rng.normal(size=4))
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, np.full(4, 6.0))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(t(np.ones(3)) * 2.0)


def test_graph_freed_after_backward(rng):
    x = t(rng.normal(size=3))
    y = (x * x).sum()
    backward(y)
    assert y._parents == ()
    z = (x * x).sum()
    backward(z, retain_graph=True)
    assert z._parents != ()


def test_topological_order_inputs_first(rng):
    x = t(rng.normal(size=(2, 3, 3)))
    p = t(rng.normal(size=2))
    loss = bce_loss(fgbg_softmax(cosine_map(x, p), cosine_map(x, p * 2.0), 5.0)[0], np.eye(3))
    order = topo_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    assert order[-1] is loss


def test_forward_replay_is_bit_exact(rng):
    x = rng.normal(size=(2, 6, 6))
    w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    a = relu(conv2d(t(x), t(w), t(b), 2, 1)).data
    c = relu(conv2d(t(x), t(w), t(b), 2, 1)).data
    assert np.array_equal(a, c)


def test_reachable_leaves_receive_gradients(rng):
    f = t(rng.normal(size=(3, 4, 4)))
    p = t(rng.normal(size=3))
    q = t(rng.normal(size=3))
    unused = t(rng.normal(size=3))
    loss = bce_loss(fgbg_softmax(cosine_map(f, p), cosine_map(f, q), 10.0)[0], np.eye(4))
    backward(loss)
    assert all(v.grad is not None and v.grad.shape == v.shape for v in (f, p, q))
    assert unused.grad is None


# finite-difference sweep: >= 10 random instances per op ---------------------------


@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradcheck(seed):
    r = np.random.default_rng(100 + seed)
    x = t(r.normal(size=(2, 5, 5)))
    w = t(r.normal(size=(3, 2, 3, 3)))
    b = t(r.normal(size=3))
    g_conv = r.normal(size=(3, 3, 3))
    assert max(gradcheck(lambda: (conv2d(x, w, b, 2, 1) * g_conv).sum(), [x, w, b])) < REL_TOL

    a = r.normal(size=(3, 4))
    a[np.abs(a) < 1e-2] = 0.3
    at = t(a)
    g_a = r.normal(size=a.shape)
    assert gradcheck(lambda: (relu(at) * g_a).sum(), [at])[0] < REL_TOL

    f = t(r.normal(size=(4, 3, 3)))
    p = t(r.normal(size=4))
    g_cos = r.normal(size=(3, 3))
    assert max(gradcheck(lambda: (cosine_map(f, p) * g_cos).sum(), [f, p])) < REL_TOL

    s1, s2 = t(r.uniform(-1, 1, (3, 3))), t(r.uniform(-1, 1, (3, 3)))
    g_sm = r.normal(size=(2, 3, 3))
    assert max(gradcheck(lambda: (fgbg_softmax(s1, s2, 4.0) * g_sm).sum(), [s1, s2])) < REL_TOL

    pr = t(r.uniform(0.05, 0.95, (3, 3)))
    y = r.uniform(0, 1, (3, 3))
    assert gradcheck(lambda: bce_loss(pr, y), [pr])[0] < REL_TOL

    wt = t(r.uniform(0.0, 1.0, (3, 3)))
    g_map = r.normal(size=4)
    assert max(gradcheck(lambda: (masked_average(f, wt) * g_map).sum(), [f, wt])) < REL_TOL


# downsample ------------------------------------------------------------------------


def test_downsample_all_ones():
    np.testing.assert_allclose(downsample_mask(np.ones((8, 8)), 3, 5), np.ones((3, 5)), rtol=0, atol=1e-12)


def test_downsample_average():
    assert downsample_mask(np.array([[1, 1], [0, 0]]), 1, 1).tolist() == [[0.5]]


def test_downsample_checkerboard_block_oracle():
    cb = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    out = downsample_mask(cb, 2, 2)
    oracle = np.array([[cb[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(2)] for i in range(2)])
    np.testing.assert_array_equal(out, oracle)
    np.testing.assert_array_equal(out, np.full((2, 2), 0.5))


def test_downsample_non_integer_ratio_preserves_mean(rng):
    m = (rng.random((10, 7)) > 0.5).astype(float)
    out = downsample_mask(m, 4, 3)
    assert out.mean() == pytest.approx(m.mean(), abs=1e-12)
    assert out.min() >= 0 and out.max() <= 1


def test_downsample_zero_target():
    with pytest.raises(ValueError):
        downsample_mask(np.ones((4, 4)), 0, 2)
