import numpy as np
import pytest

import discriminator
import tensor_core as tc
from discriminator import Discriminator, coordinate_channels, r1_penalty
from tensor_core import ShapeError


def _critic(resolution: int = 8, seed: int = 0) -> Discriminator:
    return Discriminator(resolution, (4, 8), np.random.default_rng(seed))


def _images(b: int, r: int, seed: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, (b, r, r, 3))


def test_scores_have_batch_shape():
    critic = _critic()
    assert critic(_images(3, 8)).shape == (3,)


def test_resolution_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        _critic()(_images(1, 16))


def test_coordinate_channels_span_pixel_centers():
    coords = coordinate_channels(4, 2)
    assert coords.shape == (4, 2, 2)
    np.testing.assert_allclose(coords[0, 0], [-0.5, -0.75])
    np.testing.assert_allclose(coords[-1, -1], [0.5, 0.75])


def test_input_gradient_matches_autodiff():
    critic = _critic()
    x = tc.parameter(_images(2, 8))
    critic(x).sum().backward()
    np.testing.assert_allclose(critic.input_gradient(x.data).data, x.grad, atol=1e-10)


def test_r1_penalty_gradients_match_finite_differences():
    critic = _critic(seed=3)
    images = _images(2, 8, seed=4)
    params = [critic.head_weight, critic.blocks[0].conv1.weight, critic.from_rgb.bias]
    err = tc.gradcheck(lambda: r1_penalty(critic, images), params, max_entries=6)
    assert err < 1e-6


def test_r1_of_linear_critic_is_squared_weight_norm(monkeypatch):
    monkeypatch.setattr(discriminator, "SLOPE", 1.0)
    critic = _critic()
    x = tc.parameter(np.zeros((1, 8, 8, 3)))
    critic(x).sum().backward()
    c = x.grad[0]
    for images in (_images(2, 8, seed=3), _images(3, 8, seed=4)):
        np.testing.assert_allclose(critic.input_gradient(images).data, np.broadcast_to(c, images.shape), atol=1e-12)
        assert float(r1_penalty(critic, images).data) == pytest.approx(float(np.sum(c * c)), rel=1e-10)
