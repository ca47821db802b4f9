"""Gradient checks and graph semantics for the autodiff engine."""

import numpy as np
import pytest

from obfuscheck import autodiff as ad
from obfuscheck.autodiff import Tensor
from obfuscheck.errors import ShapeError, StateError


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# per-primitive gradient checks (float64 shadow vs central differences)

def test_grad_matmul():
    r = ad.check_gradients(lambda a, b: ad.tsum(ad.matmul(a, b)),
                           [rand(3, 4), rand(4, 5, seed=1)])
    assert r["ok"], r


def test_grad_bias_add_2d():
    r = ad.check_gradients(lambda x, b: ad.tsum(ad.bias_add(x, b)),
                           [rand(3, 4), rand(4, seed=1)])
    assert r["ok"], r


def test_grad_bias_add_4d():
    r = ad.check_gradients(lambda x, b: ad.tsum(ad.bias_add(x, b)),
                           [rand(2, 3, 4, 4), rand(3, seed=1)])
    assert r["ok"], r


def test_grad_add_mul_scale():
    r = ad.check_gradients(
        lambda a, b: ad.tsum(ad.scale(ad.mul(ad.add(a, b), b), -2.5)),
        [rand(4, 4), rand(4, 4, seed=1)])
    assert r["ok"], r


def test_grad_relu():
    # keep inputs away from the kink where central differences lie
    x = rand(5, 5)
    x[np.abs(x) < 0.05] = 0.1
    r = ad.check_gradients(lambda t: ad.tsum(ad.relu(t)), [x])
    assert r["ok"], r


def test_grad_avg_pool2():
    r = ad.check_gradients(lambda x: ad.tsum(ad.avg_pool2(x)), [rand(2, 2, 4, 6)])
    assert r["ok"], r


def test_grad_flatten():
    r = ad.check_gradients(lambda x: ad.tsum(ad.flatten(x)), [rand(2, 3, 2, 2)])
    assert r["ok"], r


@pytest.mark.parametrize("padding", [0, 1])
def test_grad_conv2d(padding):
    r = ad.check_gradients(
        lambda x, w: ad.tsum(ad.conv2d(x, w, padding=padding)),
        [rand(2, 2, 5, 5), 0.3 * rand(3, 2, 3, 3, seed=1)])
    assert r["ok"], r


def test_grad_cross_entropy():
    y = np.array([0, 2, 1])
    r = ad.check_gradients(lambda z: ad.cross_entropy(z, y), [rand(3, 4)])
    assert r["ok"], r


def test_grad_composite_network_shape():
    # conv -> relu -> pool -> flatten -> matmul -> bias -> cross-entropy
    y = np.array([1, 0])

    def f(x, w, fw, fb):
        h = ad.flatten(ad.avg_pool2(ad.relu(ad.conv2d(x, w, padding=1))))
        return ad.cross_entropy(ad.bias_add(ad.matmul(h, fw), fb), y)

    r = ad.check_gradients(f, [rand(2, 1, 4, 4), 0.5 * rand(2, 1, 3, 3, seed=1),
                               rand(8, 3, seed=2), rand(3, seed=3)])
    assert r["ok"], r


# ---------------------------------------------------------------------------
# forward-value oracles

def test_conv2d_known_values():
    # 1x1 input channel, identity-like kernel checks the correlation direction
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    w = Tensor(np.array([[[[0, 0, 0], [0, 1, 0], [0, 0, 0]]]], dtype=np.float32))
    out = ad.conv2d(x, w, padding=1)
    np.testing.assert_array_equal(out.data, x.data)
    k = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    out = ad.conv2d(x, k)
    np.testing.assert_array_equal(out.data[0, 0], [[8, 12], [20, 24]])


def test_avg_pool2_known_values():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    out = ad.avg_pool2(x)
    np.testing.assert_array_equal(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_cross_entropy_uniform_logits():
    z = Tensor(np.zeros((2, 10), dtype=np.float32), requires_grad=True)
    loss = ad.cross_entropy(z, np.array([3, 7]))
    assert loss.data == pytest.approx(np.log(10), rel=1e-6)


def test_cross_entropy_logsumexp_stability():
    z = Tensor(np.array([[1000.0, 0.0], [-1000.0, 0.0]], dtype=np.float64),
               requires_grad=True)
    loss = ad.cross_entropy(z, np.array([0, 1]))
    assert np.isfinite(loss.data) and loss.data == pytest.approx(0.0, abs=1e-12)
    ad.backward(loss)
    assert np.all(np.isfinite(z.grad))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([[-1.0, 0.0, 2.0]]), requires_grad=True)
    ad.backward(ad.tsum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# graph semantics

def test_fanout_accumulates_gradients():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    ad.backward(ad.tsum(ad.add(x, x)))
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_repeated_backward_accumulates_on_leaf():
    x = Tensor(np.ones(3), requires_grad=True)
    ad.tsum(x).backward()
    ad.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.relu(x))


def test_backward_requires_graph():
    with pytest.raises(StateError):
        ad.backward(Tensor(np.float32(1.0)))


def test_no_grad_tracking_without_requires_grad():
    out = ad.matmul(Tensor(rand(2, 3)), Tensor(rand(3, 2, seed=1)))
    assert not out.requires_grad and out.parents == ()


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(rand(2, 3)), Tensor(rand(2, 3)))
    with pytest.raises(ShapeError):
        ad.add(Tensor(rand(2, 3)), Tensor(rand(3, 2)))
    with pytest.raises(ShapeError):
        ad.avg_pool2(Tensor(rand(1, 1, 3, 4)))


def test_forward_dtype_stays_float32():
    x = Tensor(rand(2, 3).astype(np.float32))
    w = Tensor(rand(3, 4, seed=1).astype(np.float32))
    assert ad.matmul(x, w).data.dtype == np.float32


def test_forward_bitwise_reproducible():
    x = rand(4, 1, 8, 8).astype(np.float32)
    w = rand(2, 1, 3, 3, seed=1).astype(np.float32)

    def once():
        out = ad.conv2d(Tensor(x, requires_grad=True), Tensor(w))
        return out.data.tobytes()

    assert once() == once()


def test_numeric_gradient_of_quadratic():
    g = ad.numeric_gradient(lambda a: float((a ** 2).sum()), [np.array([1.0, -2.0])], 0)
    np.testing.assert_allclose(g, [2.0, -4.0], rtol=1e-6)
