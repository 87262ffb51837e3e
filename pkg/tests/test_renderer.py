import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from oracles import composite_loop
from rectnerf.renderer import composite, render_image


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_single_opaque_sample():
    z = _t([[1.0, 2.0, 3.0]])
    sigma = _t([[0.0, 30.0, 0.0]])
    colors = _t([[[0, 1, 0], [1, 0, 0], [0, 0, 1]]])
    out = composite(sigma, colors, z)
    assert torch.allclose(out.color[0], _t([1, 0, 0]), atol=1e-8)
    assert float(out.depth[0]) == pytest.approx(2.0, abs=1e-8)


def test_empty_space_is_black():
    z = _t([np.linspace(1, 2, 5)])
    out = composite(torch.zeros_like(z), torch.rand(1, 5, 3, dtype=torch.float64), z)
    assert torch.equal(out.color, torch.zeros(1, 3, dtype=torch.float64))
    assert float(out.opacity[0]) == 0.0


def test_white_background_fills_transparency():
    z = _t([np.linspace(1, 2, 5)])
    out = composite(torch.zeros_like(z), torch.rand(1, 5, 3, dtype=torch.float64), z, white_background=True)
    assert torch.equal(out.color, torch.ones(1, 3, dtype=torch.float64))


def test_two_samples_half_and_quarter():
    z = _t([[1.0, 2.0]])
    sigma = _t([[np.log(2), np.log(2)]])  # unit intervals: sigma * delta = ln 2
    c1, c2 = np.array([0.2, 0.4, 0.6]), np.array([1.0, 0.5, 0.0])
    out = composite(sigma, _t([[c1, c2]]), z)
    np.testing.assert_allclose(out.weights[0].numpy(), [0.5, 0.25], atol=1e-15)
    np.testing.assert_allclose(out.color[0].numpy(), 0.5 * c1 + 0.25 * c2, atol=1e-15)
    want, _, _ = composite_loop(sigma[0].tolist(), [c1, c2], z[0].tolist())
    np.testing.assert_allclose(out.color[0].numpy(), want, atol=1e-15)


def test_composite_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 24))
        z = np.sort(rng.uniform(0.5, 6, n))
        sigma = rng.exponential(rng.uniform(0.1, 10), n)
        colors = rng.random((n, 3))
        strict = bool(rng.integers(2))
        want_c, want_d, want_w = composite_loop(sigma, colors, z, strict)
        out = composite(_t([sigma]), _t([colors]), _t([z]), strict_delta=strict)
        assert np.abs(out.color[0].numpy() - want_c).max() < 1e-7
        assert abs(float(out.depth[0]) - want_d) < 1e-7
        assert np.abs(out.weights[0].numpy() - want_w).max() < 1e-7


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40))
def test_transmittance_and_weight_bounds(seed, n):
    rng = np.random.default_rng(seed)
    z = _t(np.sort(rng.uniform(0.1, 10, (8, n)), axis=1))
    sigma = _t(rng.exponential(rng.uniform(0.01, 100), (8, n)))
    out = composite(sigma, _t(rng.random((8, n, 3))), z)
    T = out.transmittance
    assert (T[:, 0] == 1).all()
    assert (T[:, 1:] <= T[:, :-1]).all()
    assert ((out.weights >= 0) & (out.weights <= 1)).all()
    assert (out.opacity <= 1 + 1e-6).all()
    assert ((out.color >= 0) & (out.color <= 1)).all()


def _targets(scene):
    views = [scene.views[i] for i in (1, 2, 3)]
    return views, scene.views[0]


def test_render_image_chunk_invariance(small_scene):
    model = tiny_model(torch.float32)
    views, target = _targets(small_scene)
    args = (views, target.intrinsics, target.pose, target.near, target.far)
    a = render_image(model, *args, chunk_size=256)
    b = render_image(model, *args, chunk_size=4096)
    c = render_image(model, *args, chunk_size=77)
    for x in (b, c):
        assert np.array_equal(a.image, x.image)
        assert np.array_equal(a.depth, x.depth)
        assert np.array_equal(a.opacity, x.opacity)
    assert a.image.shape == (32, 32, 3) and a.depth.shape == (32, 32)


def test_render_image_restores_training_mode(small_scene):
    model = tiny_model(torch.float32)
    model.train()
    views, target = _targets(small_scene)
    render_image(model, views, target.intrinsics, target.pose, target.near, target.far)
    assert model.training


def test_zero_parameters_render_constant_image(small_scene):
    model = tiny_model(torch.float32, color_anchor=False)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.field.m4.net[-2].bias.copy_(torch.tensor([0.3, -1.0, 2.0]))
        model.field.m2.net[-2].bias.fill_(5.0)
    views, target = _targets(small_scene)
    out = render_image(model, views, target.intrinsics, target.pose, target.near, target.far)
    colors = out.image.reshape(-1, 3)
    assert np.ptp(colors, axis=0).max() < 1e-6
    expected = torch.sigmoid(torch.tensor([0.3, -1.0, 2.0])).numpy()
    np.testing.assert_allclose(colors[0] / out.opacity.reshape(-1)[0], expected, atol=1e-5)


def test_rendered_depth_is_camera_z(small_scene):
    """A fully opaque first sample sits at the near plane along the optical axis."""
    model = tiny_model(torch.float64)
    with torch.no_grad():
        for p in model.field.m2.parameters():
            p.zero_()
        model.field.m2.net[-2].bias.fill_(1e4)
    views, target = _targets(small_scene)
    out = render_image(model, views, target.intrinsics, target.pose, target.near, target.far)
    # ray distance near -> camera depth near * cos(angle to the optical axis)
    k = target.intrinsics
    v, u = np.mgrid[0 : k.height, 0 : k.width]
    cos = 1 / np.sqrt(((u - k.cx) / k.fx) ** 2 + ((v - k.cy) / k.fy) ** 2 + 1)
    np.testing.assert_allclose(out.depth, target.near * cos, rtol=1e-9)


def test_zero_initialized_head_gives_half_grey(small_scene):
    model = tiny_model(torch.float64, color_anchor=False)
    nn.init.zeros_(model.field.m4.net[-2].weight)
    nn.init.zeros_(model.field.m4.net[-2].bias)
    views, target = _targets(small_scene)
    out = render_image(model, views, target.intrinsics, target.pose, target.near, target.far)
    np.testing.assert_allclose(out.image, np.repeat(0.5 * out.opacity[..., None], 3, -1), atol=1e-12)
