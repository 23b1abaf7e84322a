import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import reference_guidance
from mspn.engine import Tensor, grad_check, ops
from mspn.errors import ConfigError
from mspn.guidance import (
    GuidanceConfig,
    extract_high_freq,
    guidance_forward,
    init_guidance_params,
    predict_initial_depth,
)

TINY = GuidanceConfig(hf_channels=2, widths=(3, 4, 4), out_channels=3, depth_head=True)


def inputs(h, w, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
    gt = rng.uniform(1, 8, (h, w)).astype(np.float32)
    sparse = np.where(rng.random((h, w)) < 0.1, gt, 0).astype(np.float32)
    return image, sparse, gt * 1.1


def hf_params(conv3, conv1, channels=3):
    ps = init_guidance_params(GuidanceConfig(hf_channels=channels), dtype=np.float64)
    ps.set_data("guidance.hf.conv3.weight", conv3)
    ps.set_data("guidance.hf.conv3.bias", np.zeros(channels))
    ps.set_data("guidance.hf.conv1.weight", conv1)
    ps.set_data("guidance.hf.conv1.bias", np.zeros(channels))
    return ps


def averaging_identity_pair():
    conv3 = np.zeros((3, 3, 3, 3))
    conv1 = np.zeros((3, 3, 1, 1))
    for c in range(3):
        conv3[c, c] = 1 / 9
        conv1[c, c] = 1.0
    return conv3, conv1


@pytest.mark.parametrize("value", [0.0, 0.25, 0.5, 1.0])
def test_high_freq_of_constant_image_is_zero(value):
    ps = hf_params(*averaging_identity_pair())
    out = extract_high_freq(Tensor(np.full((3, 6, 7), value)), ps)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-15)


def test_high_freq_channel_mean_pair_is_near_zero():
    ps = hf_params(np.full((3, 3, 3, 3), 1 / 27), np.full((3, 3, 1, 1), 1 / 3))
    out = extract_high_freq(Tensor(np.full((3, 5, 5), 0.7)), ps)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_high_freq_impulse_response():
    conv3, conv1 = averaging_identity_pair()
    ps = hf_params(conv3, conv1)
    img = np.zeros((3, 7, 7))
    img[0, 3, 3] = 1.0
    out = extract_high_freq(Tensor(img), ps).data
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1 / 9
    expected[3, 3] -= 1.0
    np.testing.assert_allclose(out[0], expected, atol=1e-15)
    assert not out[1:].any()


def test_high_freq_zero_kernels():
    ps = hf_params(np.zeros((3, 3, 3, 3)), np.zeros((3, 3, 1, 1)))
    out = extract_high_freq(Tensor(np.random.default_rng(0).uniform(size=(3, 5, 5))), ps)
    assert not out.data.any()


def test_default_output_shape_and_determinism():
    ps = init_guidance_params(seed=3)
    image, sparse, d0 = inputs(32, 32)
    g1 = guidance_forward(image, sparse, d0, ps)
    g2 = guidance_forward(image, sparse, d0, ps)
    assert g1.shape == (64, 32, 32)
    assert g1.dtype == np.float32
    assert np.array_equal(g1.data, g2.data)


def test_zero_params_give_zero_output():
    ps = init_guidance_params(TINY, seed=1)
    for name in ps:
        ps.set_data(name, np.zeros(ps[name].shape, np.float32))
    image, sparse, d0 = inputs(16, 16)
    assert not guidance_forward(image, sparse, d0, ps, TINY).data.any()


@given(st.integers(16, 64), st.integers(16, 64))
@settings(max_examples=12, deadline=None)
def test_output_size_matches_input(h, w):
    ps = init_guidance_params(TINY, seed=0)
    image, sparse, d0 = inputs(h, w)
    assert guidance_forward(image, sparse, d0, ps, TINY).shape == (TINY.out_channels, h, w)


def test_spatial_mismatch_rejected():
    ps = init_guidance_params(TINY)
    image, sparse, d0 = inputs(16, 16)
    with pytest.raises(ConfigError):
        guidance_forward(image, sparse[:8], d0, ps, TINY)


def test_initial_depth_positive():
    cfg = GuidanceConfig(depth_head=True)
    ps = init_guidance_params(cfg, seed=2)
    image, sparse, _ = inputs(32, 32)
    g, depth = predict_initial_depth(image, sparse, ps, cfg)
    assert g.shape == (64, 32, 32) and depth.shape == (32, 32)
    assert (depth.data > 0).all()


def test_initial_depth_zero_trunk_gives_softplus_of_bias():
    ps = init_guidance_params(TINY, seed=2, dtype=np.float64)
    for name in ps:
        ps.set_data(name, np.zeros(ps[name].shape))
    ps.set_data("guidance.head.bias", np.array([0.3]))
    image, sparse, _ = inputs(16, 16)
    _, depth = predict_initial_depth(image, sparse, ps, TINY)
    np.testing.assert_allclose(depth.data, np.log1p(np.exp(0.3)), rtol=1e-15)


def test_initial_depth_needs_head():
    ps = init_guidance_params(GuidanceConfig(), seed=0)
    image, sparse, _ = inputs(16, 16)
    with pytest.raises(ConfigError):
        predict_initial_depth(image, sparse, ps, GuidanceConfig())


@pytest.mark.parametrize("h,w", [(8, 8), (12, 20)])
def test_forward_matches_double_precision_replay(h, w):
    ps = init_guidance_params(TINY, seed=4, dtype=np.float64)
    image, sparse, d0 = inputs(h, w, seed=5)
    g, depth = predict_initial_depth(image.astype(np.float64), sparse, ps, TINY)
    ref_g, ref_depth = reference_guidance(image, sparse, np.zeros((h, w)), ps, TINY, with_head=True)
    np.testing.assert_allclose(g.data, ref_g, atol=1e-10)
    np.testing.assert_allclose(depth.data, ref_depth, atol=1e-10)
    out = guidance_forward(image.astype(np.float64), sparse, d0, ps, TINY)
    np.testing.assert_allclose(out.data, reference_guidance(image, sparse, d0, ps, TINY), atol=1e-10)


def test_guidance_gradients_pass_grad_check():
    ps = init_guidance_params(TINY, seed=6)
    image, sparse, d0 = inputs(8, 8, seed=6)
    w = np.random.default_rng(1).normal(size=(TINY.out_channels, 8, 8))

    def f(P):
        return ops.sum_all(guidance_forward(image.astype(np.float64), sparse, d0, P, TINY) * Tensor(w))

    assert grad_check(f, ps, eps=1e-6) < 1e-3
