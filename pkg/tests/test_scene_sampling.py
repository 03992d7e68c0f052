import math

import numpy as np
import pytest

from run_config import CameraConfig, LightConfig
from scene_sampling import (
    CameraPose,
    LightCondition,
    PointSamples,
    generate_rays,
    hierarchical_resample,
    random_patch,
    sample_camera,
    sample_latent,
    sample_light,
    stratified_sample,
)


def test_frontal_camera_sits_on_negative_z():
    pose = CameraPose(0.0, 0.0, 1.0)
    np.testing.assert_allclose(pose.position, [0.0, 0.0, -1.0])
    np.testing.assert_allclose(pose.rotation[:, 2], [0.0, 0.0, -1.0], atol=1e-12)


def test_rotation_is_orthonormal_even_looking_straight_down():
    for pose in (CameraPose(0.3, -0.4, 2.0), CameraPose(math.pi / 2, 0.0, 1.0)):
        r = pose.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)


def test_rays_are_unit_row_major_and_centered():
    rays = generate_rays(CameraPose(0.0, 0.0, 1.0), 5, 3, 30.0)
    assert len(rays) == 15
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=-1), 1.0)
    np.testing.assert_array_equal(rays.pixels[:6], [[0, 0], [1, 0], [2, 0], [3, 0], [4, 0], [0, 1]])
    np.testing.assert_allclose(rays.directions[7], [0.0, 0.0, 1.0], atol=1e-12)
    # v grows downward
    assert rays.directions[2, 1] > 0 > rays.directions[12, 1]


def test_generate_rays_rejects_bad_fov():
    with pytest.raises(ValueError, match="fov"):
        generate_rays(CameraPose(0.0, 0.0), 4, 4, 180.0)


def test_crop_matches_full_frame_pixels():
    rays = generate_rays(CameraPose(0.1, 0.2), 8, 6, 20.0)
    patch = rays.crop(2, 3, 4)
    assert len(patch) == 16
    np.testing.assert_array_equal(patch.pixels[0], [3, 2])
    np.testing.assert_array_equal(patch.pixels[-1], [6, 5])
    with pytest.raises(ValueError):
        rays.crop(4, 0, 4)


def test_random_patch_stays_in_frame():
    rng = np.random.default_rng(0)
    for _ in range(50):
        top, left = random_patch(rng, 10, 7, 5)
        assert 0 <= top <= 2 and 0 <= left <= 5


def test_stratified_samples_one_per_bin():
    samples = stratified_sample((4, 3), 1.0, 2.0, 5, np.random.default_rng(1))
    assert samples.depths.shape == (4, 3, 5)
    bins = np.floor((samples.depths - 1.0) / 0.2).astype(int)
    np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(5), bins.shape))
    np.testing.assert_allclose(samples.depths[..., -1] + samples.deltas[..., -1], 2.0)


def test_stratified_rejects_empty_interval():
    with pytest.raises(ValueError):
        stratified_sample(2, 1.0, 1.0, 4, np.random.default_rng(0))


def test_hierarchical_resample_follows_weight_mass():
    coarse = PointSamples.from_depths(np.array([[0.0, 1.0, 2.0, 3.0]]), 0.0, 4.0)
    weights = np.array([[0.0, 0.0, 1.0, 0.0]])
    merged = hierarchical_resample(coarse, weights, 16, np.random.default_rng(2))
    assert merged.count == 20
    assert np.all(np.diff(merged.depths, axis=-1) >= 0)
    extra = np.setdiff1d(merged.depths[0], coarse.depths[0])
    assert np.all((extra >= 2.0) & (extra <= 3.0))


def test_hierarchical_resample_zero_weights_fall_back_to_uniform():
    coarse = stratified_sample(3, 0.5, 1.5, 4, np.random.default_rng(3))
    merged = hierarchical_resample(coarse, np.zeros((3, 4)), 8, np.random.default_rng(4))
    assert merged.depths.shape == (3, 12)
    assert np.all((merged.depths >= 0.5) & (merged.depths <= 1.5))


def test_hierarchical_resample_rejects_negative_weights():
    coarse = PointSamples.from_depths(np.array([[0.0, 1.0]]), 0.0, 2.0)
    with pytest.raises(ValueError, match="negative"):
        hierarchical_resample(coarse, np.array([[1.0, -0.1]]), 2, np.random.default_rng(0))


def test_light_parse_normalizes_direction():
    light = LightCondition.parse("0.3,0.7,0,0,-2")
    assert (light.ka, light.kd) == (0.3, 0.7)
    np.testing.assert_allclose(light.direction, [0.0, 0.0, -1.0])
    with pytest.raises(ValueError):
        LightCondition.parse("0.3,0.7,0,0,0")
    with pytest.raises(ValueError):
        LightCondition.parse("0.3,0.7,0,0")


def test_light_rejects_negative_intensity_and_non_unit_direction():
    with pytest.raises(ValueError):
        LightCondition(-0.1, 1.0, np.array([0.0, 0.0, -1.0]))
    with pytest.raises(ValueError):
        LightCondition(0.1, 1.0, np.array([0.0, 0.0, -2.0]))


def test_sampling_is_reproducible_per_stream():
    cam_cfg, light_cfg = CameraConfig(), LightConfig()
    a = [sample_camera(np.random.default_rng([5, i]), cam_cfg) for i in range(3)]
    b = [sample_camera(np.random.default_rng([5, i]), cam_cfg) for i in range(3)]
    assert a == b
    la = sample_light(np.random.default_rng(9), light_cfg)
    lb = sample_light(np.random.default_rng(9), light_cfg)
    np.testing.assert_array_equal(la.direction, lb.direction)
    assert light_cfg.ka_min <= la.ka <= light_cfg.ka_max
    assert la.direction[2] < 0


def test_zero_spread_camera_is_frontal():
    pose = sample_camera(np.random.default_rng(0), CameraConfig(sigma_v=0.0, sigma_h=0.0))
    assert (pose.pitch, pose.yaw) == (0.0, 0.0)


def test_latents_are_standard_normal_and_seeded():
    z = sample_latent(np.random.default_rng(3), 4000, 8)
    assert z.shape == (4000, 8)
    assert abs(z.mean()) < 0.05 and abs(z.std() - 1.0) < 0.05
    np.testing.assert_array_equal(z[:2], sample_latent(np.random.default_rng(3), 2, 8))
