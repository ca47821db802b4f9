"""Model construction, noise-injection statistics, and gradient checks."""

import numpy as np
import pytest

from obfuscheck.models import (ALPHA_INIT, Network, build_model, compute_sigma,
                               grad_check)
from obfuscheck.rng import derive_rng


@pytest.fixture(scope="module")
def small_input():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, (2, 1, 4, 4)).astype(np.float32)


def tiny(pni="none", granularity="layerwise", arch="mlp", seed=0):
    return build_model(arch, pni, granularity, input_shape=(1, 4, 4),
                       classes=3, init_seed=seed)


# ---------------------------------------------------------------------------
# compute_sigma

def test_compute_sigma_matches_two_pass():
    v = np.random.default_rng(1).standard_normal(5000).astype(np.float32)
    mu = sum(float(x) for x in v) / len(v)
    var = sum((float(x) - mu) ** 2 for x in v) / len(v)
    assert compute_sigma(v) == pytest.approx(np.sqrt(var), rel=1e-6)


def test_compute_sigma_is_population_not_sample():
    v = np.array([0.0, 2.0])
    assert compute_sigma(v) == pytest.approx(1.0)  # /n, not /(n-1)


def test_compute_sigma_constant_tensor():
    assert compute_sigma(np.full((3, 3), 7.0)) == 0.0


def test_compute_sigma_rejects_empty():
    with pytest.raises(ValueError):
        compute_sigma(np.empty(0))


def test_compute_sigma_statistical_oracle():
    # std of 1e5 unit normals should land within ~1% of 1
    v = derive_rng(3, "sigma-oracle").normal((100_000,))
    assert 0.99 < compute_sigma(v) < 1.01


# ---------------------------------------------------------------------------
# construction

def test_build_counts_mlp():
    m = tiny()
    assert sorted(m.params) == ["fc1.b", "fc1.w", "fc2.b", "fc2.w"]
    assert m.params["fc1.w"].shape == (64, 16)
    assert not m.is_stochastic


def test_build_counts_cnn():
    m = tiny(arch="cnn")
    assert m.params["conv1.w"].shape == (8, 1, 3, 3)
    assert m.params["conv2.w"].shape == (16, 8, 3, 3)
    assert m.params["fc1.w"].shape == (64, 16 * 2 * 2)


def test_build_is_seed_deterministic():
    a, b = tiny(seed=5), tiny(seed=5)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    assert tiny(seed=6).params["fc1.w"].data.tobytes() != \
        a.params["fc1.w"].data.tobytes()


def test_build_rejects_unknown_options():
    with pytest.raises(ValueError):
        build_model("transformer")
    with pytest.raises(ValueError):
        tiny(pni="pni-x")
    with pytest.raises(ValueError):
        tiny(pni="pni-w", granularity="global")


@pytest.mark.parametrize("pni,granularity,expected", [
    ("pni-w", "layerwise", ()),
    ("pni-w", "channelwise", (64,)),
    ("pni-w", "elementwise", (64, 16)),
    ("pni-a-a", "layerwise", ()),
    ("pni-a-a", "channelwise", (64,)),
    ("pni-a-a", "elementwise", (64,)),
])
def test_alpha_shapes_mlp_first_layer(pni, granularity, expected):
    m = tiny(pni=pni, granularity=granularity)
    assert m.params["fc1.alpha"].shape == expected
    assert np.all(m.params["fc1.alpha"].data == np.float32(ALPHA_INIT))


def test_alpha_shapes_cnn_channelwise():
    m = tiny(pni="pni-w", granularity="channelwise", arch="cnn")
    assert m.params["conv1.alpha"].shape == (8,)   # output channels
    m = tiny(pni="pni-a-a", granularity="channelwise", arch="cnn")
    assert m.params["conv1.alpha"].shape == (8,)
    m = tiny(pni="pni-a-a", granularity="elementwise", arch="cnn")
    assert m.params["conv1.alpha"].shape == (8, 4, 4)  # no batch axis


# ---------------------------------------------------------------------------
# forward semantics

def test_deterministic_forward_is_bitwise_stable(small_input):
    m = tiny()
    assert m.logits(small_input).tobytes() == m.logits(small_input).tobytes()


def test_stochastic_without_rng_equals_deterministic(small_input):
    m = tiny(pni="pni-w")
    base = tiny()
    for n in base.params:
        np.testing.assert_array_equal(m.params[n].data, base.params[n].data)
    np.testing.assert_array_equal(m.logits(small_input), base.logits(small_input))


def test_stochastic_forwards_differ_and_replay(small_input):
    m = tiny(pni="pni-w")
    a = m.logits(small_input, rng=derive_rng(0, "t"))
    b = m.logits(small_input, rng=derive_rng(0, "u"))
    assert a.tobytes() != b.tobytes()
    c = m.logits(small_input, rng=derive_rng(0, "t"))
    np.testing.assert_array_equal(a, c)


def test_frozen_draw_replay(small_input):
    m = tiny(pni="pni-a-a", granularity="channelwise")
    a = m.forward(small_input, rng=derive_rng(1, "f")).data
    frozen = dict(m.last_draws)
    b = m.forward(small_input, frozen_draws=frozen).data
    np.testing.assert_array_equal(a, b)


def test_alpha_scale_zero_recovers_deterministic(small_input):
    m = tiny(pni="pni-w")
    det = m.logits(small_input)
    noisy = m.logits(small_input, rng=derive_rng(2, "s"), alpha_scale=0.0)
    np.testing.assert_array_equal(det, noisy)
    with pytest.raises(ValueError):
        m.logits(small_input, rng=derive_rng(2, "s"), alpha_scale=-1.0)


def test_predict_tie_breaks_low(small_input):
    m = tiny()
    for n in ("fc2.w", "fc2.b"):
        m.params[n].data[...] = 0.0
    assert np.all(m.predict(small_input) == 0)


def test_clone_is_independent(small_input):
    m = tiny(pni="pni-w")
    c = m.clone()
    c.params["fc1.w"].data += 1.0
    assert not np.array_equal(m.params["fc1.w"].data, c.params["fc1.w"].data)
    assert c.is_stochastic


# ---------------------------------------------------------------------------
# injected-noise statistics

def test_injection_mean_and_std():
    # v_tilde - v = alpha * sigma * eta: mean 0 within 4 sigma, std within 2%
    m = tiny(pni="pni-w")
    w = m.params["fc1.w"].data
    sigma = compute_sigma(w)
    n_draws, idx = 200, (0, 0)
    deltas = []
    for i in range(n_draws):
        m.forward(np.zeros((1, 1, 4, 4), dtype=np.float32), rng=derive_rng(7, "stat", i))
        deltas.append(m.last_draws["fc1.alpha"].eta)
    deltas = np.stack(deltas) * ALPHA_INIT  # eta already carries sigma
    flat = deltas.reshape(-1)
    assert flat.size >= 100_000
    expected_std = ALPHA_INIT * sigma
    assert abs(flat.mean()) < 4 * expected_std / np.sqrt(flat.size)
    assert abs(flat.std() / expected_std - 1.0) < 0.02
    del idx


def test_injection_uses_population_sigma_of_target():
    m = tiny(pni="pni-w")
    m.forward(np.zeros((1, 1, 4, 4), dtype=np.float32), rng=derive_rng(0, "sig"))
    assert m.last_draws["fc1.alpha"].sigma == \
        pytest.approx(compute_sigma(m.params["fc1.w"].data), rel=1e-6)


# ---------------------------------------------------------------------------
# gradients

def test_grad_check_deterministic_mlp(small_input):
    r = grad_check(tiny(), small_input, [0, 2])
    assert r["ok"], r


def test_grad_check_pni_weight(small_input):
    r = grad_check(tiny(pni="pni-w", granularity="channelwise"), small_input, [1, 0])
    assert r["ok"], r


def test_grad_check_pni_activation(small_input):
    r = grad_check(tiny(pni="pni-a-a", granularity="elementwise"), small_input, [2, 1])
    assert r["ok"], r


def test_grad_check_cnn_pni(small_input):
    r = grad_check(tiny(pni="pni-w", arch="cnn"), small_input[:1], [1])
    assert r["ok"], r


def test_alpha_gradient_oracle():
    # layerwise pni-w on a 1-layer linear map: d loss / d alpha must equal
    # sum(eta * d loss / d w_tilde); with frozen noise this is checkable by
    # finite differences, which grad_check already covers, so here check the
    # sharing: gradient is a scalar even though eta is a full matrix.
    m = tiny(pni="pni-w")
    x = np.random.default_rng(0).uniform(0, 1, (4, 1, 4, 4)).astype(np.float32)
    m.loss_and_grad(x, np.array([0, 1, 2, 0]), rng=derive_rng(0, "a"))
    assert m.params["fc1.alpha"].grad.shape == ()


def test_input_gradient_shape_single_and_batch():
    m = tiny()
    x1 = np.zeros((1, 4, 4), dtype=np.float32)
    loss, g = m.loss_and_grad(x1, 0)
    assert g.shape == (1, 4, 4) and np.isfinite(loss)
    xb = np.zeros((3, 1, 4, 4), dtype=np.float32)
    _, gb = m.loss_and_grad(xb, np.array([0, 1, 2]))
    assert gb.shape == xb.shape
