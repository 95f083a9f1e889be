import numpy as np
import pytest

from oracles import deform_attn_loop, random_attention, random_pyramid
from rddlite.attention import (DeformAttnParams, EncoderLayer, FeaturePyramid,
                               deform_attn_multiscale, deform_attn_single, encoder_forward,
                               fuse_pyramid, reference_points, sine_embedding)
from rddlite.tensor import GradTape, Tensor, grad_check, tsum


@pytest.mark.parametrize("seed", range(6))
def test_single_scale_matches_loop(seed, backend):
    rng = np.random.default_rng(seed)
    C, M, K = 3, int(rng.integers(1, 5)), int(rng.integers(1, 9))
    params, plain = random_attention(rng, C, M, K, 1)
    x = rng.normal(size=(6, 7, C))
    z = rng.normal(size=C)
    p = rng.uniform(0, 6, size=2)
    got = deform_attn_single(z, p, x, params).data
    ref = deform_attn_loop(z, None, [x], plain, single_pixel_ref=p)
    np.testing.assert_allclose(got, ref, atol=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_multiscale_matches_loop(seed, backend):
    rng = np.random.default_rng(100 + seed)
    C, M, K, L = 4, int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 4))
    params, plain = random_attention(rng, C, M, K, L)
    levels = random_pyramid(rng, C, L)
    zs = rng.normal(size=(3, C))
    ps = rng.uniform(size=(3, 2))
    got = deform_attn_multiscale(zs, ps, levels, params).data
    for q in range(3):
        np.testing.assert_allclose(got[q], deform_attn_loop(zs[q], ps[q], levels, plain), atol=1e-10)


def test_weights_sum_to_one():
    rng = np.random.default_rng(0)
    params, _ = random_attention(rng, 3, 2, 4, 3)
    _, attn = params.offsets_and_weights(Tensor(rng.normal(size=(5, 3))))
    np.testing.assert_allclose(attn.data.sum(axis=(2, 3)), 1.0, atol=1e-12)


def test_single_point_zero_offset_returns_projected_value():
    rng = np.random.default_rng(1)
    params = DeformAttnParams.init(rng, 2, 1, 1, 1)
    x = rng.normal(size=(4, 4, 2))
    out = deform_attn_single(np.zeros(2), [2.0, 1.0], x, params).data
    expect = x[1, 2] @ params.value_proj.data @ params.output_proj.data
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_constant_map_gives_constant_output():
    rng = np.random.default_rng(2)
    params, _ = random_attention(rng, 3, 2, 3, 2)
    levels = [np.ones((4, 4, 3)), np.ones((2, 2, 3))]
    out = deform_attn_multiscale(rng.normal(size=(4, 3)), rng.uniform(size=(4, 2)), levels,
                                 params).data
    expect = np.ones(3) @ params.value_proj.data @ params.output_proj.data
    np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape), atol=1e-12)


def test_level_count_and_width_checked():
    rng = np.random.default_rng(3)
    params, _ = random_attention(rng, 3, 1, 2, 2)
    with pytest.raises(ValueError):
        deform_attn_multiscale(np.zeros(3), [0.5, 0.5], [np.zeros((4, 4, 3))], params)
    with pytest.raises(ValueError):
        deform_attn_multiscale(np.zeros(2), [0.5, 0.5], random_pyramid(rng, 3, 2, 4, 4), params)
    with pytest.raises(ValueError):
        deform_attn_single(np.zeros(3), [1.0, 1.0], np.zeros((4, 4, 3)), params)


def test_pyramid_requires_halving():
    with pytest.raises(ValueError):
        FeaturePyramid([np.zeros((8, 8, 1)), np.zeros((3, 4, 1))], (32, 32))


def test_multiscale_gradients(backend):
    rng = np.random.default_rng(4)
    params, _ = random_attention(rng, 2, 2, 2, 2, scale=0.7)
    levels = random_pyramid(rng, 2, 2, 5, 6)
    ps = rng.uniform(0.1, 0.9, size=(2, 2))
    z = rng.normal(size=(2, 2))
    assert grad_check(lambda t: tsum(deform_attn_multiscale(t, ps, levels, params) ** 2), z) <= 1e-4
    assert grad_check(lambda t: tsum(deform_attn_multiscale(z, ps, [t, levels[1]], params)),
                      levels[0]) <= 1e-4


def test_reference_points_are_pixel_centres():
    refs = reference_points([(2, 4), (1, 2)])
    assert refs.shape == (10, 2)
    np.testing.assert_allclose(refs[:4, 0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(refs[8:], [[0.25, 0.5], [0.75, 0.5]])


def test_sine_embedding_shape_and_range():
    e = sine_embedding(4, 6, 8)
    assert e.shape == (4, 6, 8) and np.all(np.abs(e) <= 1)
    assert np.all(e[:, 0, :4] == e[:, 5, :4])  # first half depends only on y


def test_encoder_preserves_shapes_and_is_differentiable():
    rng = np.random.default_rng(5)
    levels = random_pyramid(rng, 4, 3, 8, 8)
    pyr = FeaturePyramid(levels, (32, 32), [np.zeros_like(x) for x in levels])
    layer = EncoderLayer.init(rng, 4, 2, 2, 3)
    out = encoder_forward(pyr, [layer])
    assert out.shapes == pyr.shapes
    with GradTape() as tape:
        loss = tsum(fuse_pyramid(encoder_forward(pyr, [layer]), 4))
    tape.backward(loss)
    assert np.any(layer.ffn_w1.grad != 0)


def test_fuse_pyramid_sums_upsampled_levels():
    pyr = FeaturePyramid([np.ones((8, 8, 2)), np.full((4, 4, 2), 2.0)], (32, 32))
    np.testing.assert_allclose(fuse_pyramid(pyr, 4).data, 3.0)
