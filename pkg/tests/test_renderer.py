import numpy as np
import pytest

import data_metrics as dm
from renderer import (
    RenderSettings,
    composite_weights,
    compose_image,
    render_depth,
    render_image,
    render_pixel_batch,
    shading_map,
    specular_map,
    volume_render_param,
)
from scene_sampling import CameraPose, LightCondition, generate_rays
from tensor_core import ShapeError, Tensor

FRONT = np.array([[0.0, 0.0, -1.0]])
BLOB_SETTINGS = RenderSettings(near=0.5, far=1.5, samples=8, fine_samples=8)


def _blob_render(light: LightCondition, threads: int = 1, chunk: int = 64, seed: int = 0):
    bundle = generate_rays(CameraPose(0.1, -0.2), 12, 10, 40.0)
    return render_image(dm.AnalyticField(kind="blob"), None, bundle, light, "photometric", BLOB_SETTINGS,
                        np.random.default_rng(seed), chunk=chunk, threads=threads)


def test_weights_sum_to_one_minus_product_of_transmissions():
    rng = np.random.default_rng(0)
    sigma = rng.uniform(0.0, 10.0, (50, 6))
    deltas = rng.uniform(0.0, 0.2, (50, 6))
    alpha, tau, w = composite_weights(sigma, deltas)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0 - np.prod(1.0 - alpha.data, axis=-1), atol=1e-12)
    np.testing.assert_array_equal(tau.data[:, 0], 1.0)
    assert np.all(w.data >= 0)


def test_opaque_first_sample_takes_all_weight():
    _, _, w = composite_weights(np.array([[1e4, 5.0, 5.0]]), np.array([[1.0, 1.0, 1.0]]))
    np.testing.assert_allclose(w.data, [[1.0, 0.0, 0.0]], atol=1e-9)


def test_composite_weights_reject_negative_density():
    with pytest.raises(ValueError, match="negative density"):
        composite_weights(np.array([[-1.0]]), np.array([[0.1]]))


def test_volume_render_param_checks_shapes():
    w = np.array([[0.25, 0.5]])
    values = np.array([[[1.0, 0.0], [3.0, 2.0]]])
    np.testing.assert_allclose(volume_render_param(w, values).data, [[1.75, 1.0]])
    with pytest.raises(ShapeError):
        volume_render_param(w, np.ones((1, 3, 2)))


def test_depth_falls_back_to_far_when_transparent():
    d = render_depth(np.array([[0.01, 0.01], [0.5, 0.5]]), np.array([[1.0, 2.0], [1.0, 2.0]]), far=9.0)
    np.testing.assert_allclose(d.data, [9.0, 1.5])


def test_shading_and_specular_closed_forms():
    light = LightCondition.from_xy(0.3, 0.7, 0.0, 0.0)
    normals = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(shading_map(normals, light).data[:, 0], [1.0, 0.3])
    spec = specular_map(np.array([[0.5, 0.0], [0.5, 0.0]]), normals, light, np.vstack([FRONT, FRONT]))
    np.testing.assert_allclose(spec.data[:, 0], [0.35, 0.35])
    tilted = np.array([[0.0, np.sin(0.3), -np.cos(0.3)]])
    sharp = specular_map(np.array([[1.0, 1.0]]), tilted, light, FRONT, shininess_scale=20.0)
    assert sharp.data[0, 0] == pytest.approx(0.7 * np.cos(0.6) ** 21)


def test_compose_image_clamps():
    out = compose_image(np.array([[0.9, 0.5, 0.1]]), np.array([[1.5]]), np.array([[0.2]]))
    np.testing.assert_allclose(out.data, [[1.0, 0.95, 0.35]])


@pytest.mark.parametrize("seed", range(5))
def test_opaque_shell_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    scene = dm.SyntheticScene(radius=float(rng.uniform(0.3, 0.5)), albedo=rng.uniform(0.2, 0.9, 3),
                              specular=(float(rng.uniform(0.0, 0.3)), float(rng.uniform(0.0, 1.0))))
    pose = CameraPose(float(rng.normal(0.0, 0.15)), float(rng.normal(0.0, 0.3)))
    light = LightCondition.from_xy(float(rng.uniform(0.0, 0.5)), float(rng.uniform(0.3, 0.9)),
                                   float(rng.normal(0.0, 0.3)), float(rng.normal(0.3, 0.1)))
    assert dm.shell_oracle_error(scene, pose, light, 64) < 1e-6


def test_ambient_change_shifts_shading_uniformly():
    base = _blob_render(LightCondition.from_xy(0.1, 0.6, 0.2, 0.3))
    brighter = _blob_render(LightCondition.from_xy(0.3, 0.6, 0.2, 0.3))
    np.testing.assert_allclose(brighter.shading.data - base.shading.data, 0.2, atol=1e-12)
    np.testing.assert_array_equal(brighter.normal.data, base.normal.data)


def test_render_is_independent_of_thread_count():
    light = LightCondition.from_xy(0.3, 0.7, 0.0, 0.0)
    one = _blob_render(light, threads=1)
    many = _blob_render(light, threads=3)
    assert one.image.shape == (1, 10, 12, 3)
    np.testing.assert_array_equal(one.image.data, many.image.data)
    np.testing.assert_array_equal(one.depth.data, many.depth.data)


def test_render_pixel_batch_validates_inputs():
    rays = generate_rays(CameraPose(0.0, 0.0), 4, 4, 30.0)
    light = LightCondition.from_xy(0.3, 0.7, 0.0, 0.0)
    field = dm.AnalyticField(kind="blob")
    with pytest.raises(ValueError, match="render mode"):
        render_pixel_batch(field, None, rays, [light], "cartoon", BLOB_SETTINGS, np.random.default_rng(0))
    with pytest.raises(ValueError, match="lights"):
        render_pixel_batch(field, None, rays, [light, light], "photometric", BLOB_SETTINGS,
                           np.random.default_rng(0))


def test_color_mode_uses_color_head():
    rays = generate_rays(CameraPose(0.0, 0.0), 4, 4, 10.0)
    scene = dm.SyntheticScene(albedo=np.array([0.2, 0.4, 0.6]))
    field = dm.AnalyticField(scene, kind="smooth-sphere", width=0.01)
    out = render_pixel_batch(field, None, rays, [LightCondition.from_xy(0.0, 1.0, 0.0, 0.0)], "stage1-color",
                             BLOB_SETTINGS, np.random.default_rng(0), background=np.zeros(3))
    assert out.image.shape == (1, 4, 4, 3)
    assert out.albedo is None
    np.testing.assert_allclose(out.image.data[0, 1, 1], [0.2, 0.4, 0.6], atol=1e-6)
