import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgmplan import autodiff as ad
from rgmplan.autodiff import Parameter, Tape, Tensor, grad_check

TOL = 1e-3  # relative error bound in 64-bit mode


@pytest.fixture(autouse=True)
def float64():
    with ad.precision(np.float64):
        yield


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def param(shape, seed=0, **kw):
    return Parameter(rand(shape, seed, **kw))


def weighted(y: Tensor, seed=99) -> Tensor:
    """Scalar probe sum(y * R) with a fixed random R."""
    return (y * Tensor(rand(y.shape, seed))).sum()


def check(fn, params, eps=1e-5):
    return grad_check(lambda: weighted(fn()), params, eps=eps)


# ------------------------------------------------------------------ elementwise and shapes


def test_add_sub_mul_with_broadcasting():
    a, b = param((2, 3, 4), 1), param((3, 1), 2)
    assert check(lambda: ad.add(a, b), [a, b]) < TOL
    assert check(lambda: ad.sub(a, b), [a, b]) < TOL
    assert check(lambda: ad.mul(a, b), [a, b]) < TOL
    assert check(lambda: a * 3.0 - 2.0 + b / 4.0, [a, b]) < TOL
    assert check(lambda: 1.0 - a, [a]) < TOL


def test_activations():
    # keep inputs away from the kinks at zero
    x = param((3, 5), 3)
    x.data[np.abs(x.data) < 0.05] = 0.3
    assert check(lambda: ad.relu(x), [x]) < TOL
    assert check(lambda: ad.leaky_relu(x, 0.2), [x]) < TOL
    assert check(lambda: ad.sigmoid(x * 4.0), [x]) < TOL
    assert check(lambda: ad.exp(x), [x]) < TOL


def test_log_and_floor():
    x = param((4, 4), 4, lo=0.1, hi=2.0)
    assert check(lambda: ad.log(x), [x]) < TOL
    y = Parameter(np.array([1e-12, 0.5]))
    with Tape() as t:
        out = ad.log(y, 1e-8).sum()
    ad.backward(t, out)
    assert out.item() == pytest.approx(np.log(1e-8) + np.log(0.5))
    assert y.grad[0] == 0.0 and y.grad[1] == pytest.approx(2.0)


def test_sigmoid_stable_at_extremes():
    y = ad.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0])))
    assert np.all(np.isfinite(y.data))
    assert y.data.tolist() == [0.0, 0.5, 1.0]


def test_reductions_and_reshapes():
    x = param((2, 3, 4), 5)
    assert check(lambda: ad.sum_(x, axis=1), [x]) < TOL
    assert check(lambda: ad.sum_(x, axis=(0, 2), keepdims=True), [x]) < TOL
    assert check(lambda: x.mean(axis=2), [x]) < TOL
    assert check(lambda: x[:, 1:, ::2], [x]) < TOL
    assert check(lambda: x.reshape(4, 6), [x]) < TOL
    assert check(lambda: x.transpose(2, 0, 1), [x]) < TOL
    y = param((2, 2, 4), 6)
    assert check(lambda: ad.concat([x, y, x], axis=1), [x, y]) < TOL


def test_matmul_and_softmax():
    a, b = param((2, 3, 4), 7), param((4, 5), 8)
    assert check(lambda: a @ b, [a, b]) < TOL
    s = param((3, 6), 9)
    assert check(lambda: ad.softmax(s * 3.0, axis=-1), [s]) < TOL
    assert check(lambda: ad.softmax(s, axis=0), [s]) < TOL
    out = ad.softmax(Tensor(rand((4, 7), 1) * 50)).data
    assert np.allclose(out.sum(axis=-1), 1.0)


# ------------------------------------------------------------------ convolution


def conv2d_naive(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    y[ni, oi, i, j] = (patch * w[oi]).sum() + (b[oi] if b is not None else 0.0)
    return y


def conv_transpose_naive(x, w, stride, pad):
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    full = np.zeros((n, o, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    full[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[ni, ci, i, j] * w[ci]
    return full[:, :, pad : full.shape[2] - pad, pad : full.shape[3] - pad]


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 2)])
def test_conv2d_forward_matches_loops_and_grads(stride, pad, k):
    x, w, b = param((2, 3, 7, 6), 1), param((4, 3, k, k), 2), param((4,), 3)
    y = ad.conv2d(x, w, b, stride, pad)
    assert np.allclose(y.data, conv2d_naive(x.data, w.data, b.data, stride, pad))
    assert check(lambda: ad.conv2d(x, w, b, stride, pad), [x, w, b]) < TOL


@pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 1, 3), (2, 0, 3)])
def test_conv_transpose2d_forward_matches_loops_and_grads(stride, pad, k):
    x, w, b = param((2, 3, 4, 5), 4), param((3, 2, k, k), 5), param((2,), 6)
    y = ad.conv_transpose2d(x, w, None, stride, pad)
    assert np.allclose(y.data, conv_transpose_naive(x.data, w.data, stride, pad))
    assert check(lambda: ad.conv_transpose2d(x, w, b, stride, pad), [x, w, b]) < TOL


def test_conv_transpose_is_adjoint_of_conv():
    x = rand((2, 3, 8, 8), 1)
    w = rand((5, 3, 4, 4), 2)
    y = ad.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    r = rand(y.shape, 3)
    back = ad.conv_transpose2d(Tensor(r), Tensor(w), None, 2, 1).data
    assert np.isclose((y * r).sum(), (x * back).sum())


def test_transposed_conv_doubles_size():
    y = ad.conv_transpose2d(Tensor(rand((1, 2, 5, 5))), Tensor(rand((2, 3, 4, 4))), None, 2, 1)
    assert y.shape == (1, 3, 10, 10)


def test_upsample_nearest():
    x = param((1, 2, 3, 3), 7)
    y = ad.upsample_nearest2d(x, 2)
    assert y.shape == (1, 2, 6, 6) and y.data[0, 1, 5, 4] == x.data[0, 1, 2, 2]
    assert check(lambda: ad.upsample_nearest2d(x, 2), [x]) < TOL


def test_conv_errors():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(rand((1, 2, 4, 4))), Tensor(rand((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(rand((1, 2, 2, 2))), Tensor(rand((1, 2, 5, 5))))


# ------------------------------------------------------------------ batchnorm


def test_batchnorm_training_statistics_and_running_buffers():
    x = Tensor(rand((4, 3, 5, 5), 1) * 3 + 2)
    gamma, beta = Parameter(np.ones(3)), Parameter(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    y = ad.batchnorm2d(x, gamma, beta, rm, rv, training=True)
    assert np.allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    assert np.allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = 4 * 25
    assert np.allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))
    assert np.allclose(rv, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_eval_uses_buffers():
    x = Tensor(rand((2, 2, 3, 3), 2))
    rm, rv = np.array([0.5, -0.5]), np.array([4.0, 0.25])
    y = ad.batchnorm2d(x, Parameter(np.array([2.0, 1.0])), Parameter(np.array([0.0, 1.0])), rm, rv, training=False)
    expect0 = 2.0 * (x.data[:, 0] - 0.5) / np.sqrt(4.0 + 1e-5)
    expect1 = (x.data[:, 1] + 0.5) / np.sqrt(0.25 + 1e-5) + 1.0
    assert np.allclose(y.data[:, 0], expect0) and np.allclose(y.data[:, 1], expect1)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    x = param((3, 2, 4, 4), 3)
    gamma, beta = param((2,), 4, lo=0.5, hi=1.5), param((2,), 5)
    rm, rv = np.zeros(2), np.ones(2) * 1.3
    fn = lambda: ad.batchnorm2d(x, gamma, beta, rm, rv, training=training)  # noqa: E731
    assert check(fn, [x, gamma, beta]) < TOL


def test_batchnorm_shape_error():
    with pytest.raises(ValueError):
        ad.batchnorm2d(Tensor(rand((1, 3, 2, 2))), Parameter(np.ones(2)), Parameter(np.zeros(2)), np.zeros(2), np.ones(2))


# ------------------------------------------------------------------ tape mechanics


def test_gradient_accumulates_across_uses():
    a = Parameter(np.array([2.0, 3.0]))
    with Tape() as t:
        loss = (a * a + a * 3.0).sum()
    ad.backward(t, loss)
    assert np.allclose(a.grad, 2 * a.data + 3.0)


def test_backward_returns_grads_for_plain_tensors():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as t:
        loss = (x * x).sum()
    (gx,) = ad.backward(t, loss, [x])
    assert np.allclose(gx, [2.0, 4.0]) and x.grad is None


def test_no_tape_records_nothing_and_nonscalar_rejected():
    a = Parameter(np.ones(3))
    with Tape() as t:
        pass
    b = a * 2.0
    assert len(t) == 0 and b.requires_grad
    with Tape() as t:
        y = a * 2.0
    with pytest.raises(ValueError):
        ad.backward(t, y)


def test_debug_mode_flags_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(ad.NonFiniteError), np.errstate(invalid="ignore"):
            ad.log(Tensor(np.array([-1.0])))
    finally:
        ad.set_debug(False)


def test_precision_context_and_default_float32():
    assert Tensor([1.0]).dtype == np.float64
    with ad.precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32


def test_grad_check_catches_wrong_gradient():
    a = Parameter(np.array([1.0, -2.0, 0.5]))
    good = grad_check(lambda: (a * a).sum(), [a], eps=1e-5)
    bad = grad_check(lambda: (a * a).sum(), [a], eps=1e-5, analytic={id(a): 3 * a.data})
    assert good < 1e-8 and bad > 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.sampled_from([1, 2]), st.integers(0, 10**6))
def test_conv2d_random_shapes_match_naive(n, c, s, stride, seed):
    x, w = rand((n, c, s, s), seed), rand((2, c, 3, 3), seed + 1)
    y = ad.conv2d(Tensor(x), Tensor(w), None, stride, 1).data
    assert np.allclose(y, conv2d_naive(x, w, None, stride, 1))
