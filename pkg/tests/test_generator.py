import logging

import numpy as np
import pytest

import tensor_core as tc
from generator import NORMAL_FALLBACK, Generator, density_gradient, normalize_with_fallback
from run_config import NetConfig
from tensor_core import ShapeError, Tensor


def _net(**overrides) -> NetConfig:
    values = dict(latent_dim=8, hidden_dim=16, layers=2, mapping_dim=16, mapping_layers=1, normal_hidden=8)
    values.update(overrides)
    return NetConfig(**values)


def _points(b: int, p: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-0.5, 0.5, (b, p, 3))


def test_query_shapes_and_ranges():
    gen = Generator(_net(), np.random.default_rng(0))
    m = gen.mapping_forward(np.random.default_rng(1).standard_normal((2, 8)))
    assert m.gammas.shape == (2, 2, 16)
    sample = gen.query(_points(2, 5), m)
    assert sample.sigma.shape == (2, 5, 1) and np.all(sample.sigma.data >= 0)
    assert sample.albedo.shape == (2, 5, 3)
    assert np.all((sample.albedo.data > 0) & (sample.albedo.data < 1))
    assert sample.feature.shape == (2, 5, 4)
    assert sample.specular.shape == (2, 5, 2) and np.all(sample.specular.data >= 0)


def test_stage1_color_query():
    gen = Generator(_net(), np.random.default_rng(0))
    m = gen.mapping_forward(np.zeros((1, 8)))
    sample = gen.query(_points(1, 4), m, np.array([0.0, 0.0, 1.0]), color=True)
    assert sample.color.shape == (1, 4, 3)
    assert sample.albedo is None


def test_zero_mapping_parameters_give_zero_film():
    gen = Generator(_net(), np.random.default_rng(0))
    for layer in gen.mapping:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    m = gen.mapping_forward(np.random.default_rng(2).standard_normal((3, 8)))
    np.testing.assert_array_equal(m.gammas.data, 0.0)
    np.testing.assert_array_equal(m.betas.data, 0.0)
    np.testing.assert_array_equal(gen.backbone_forward(_points(3, 2), m).data, 0.0)


def test_latent_length_mismatch_is_shape_error():
    gen = Generator(_net(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        gen.mapping_forward(np.zeros((2, 7)))


def test_trainable_parameters_follow_stage():
    gen = Generator(_net(), np.random.default_rng(0))
    stage1 = gen.trainable_parameters(1)
    stage2 = gen.trainable_parameters(2)
    assert "color.0.weight" in stage1 and "albedo.weight" not in stage1
    assert "color.0.weight" not in stage2
    assert {"albedo.weight", "specular.weight", "normal.1.bias", "sigma.weight"} <= set(stage2)
    assert set(stage1) | set(stage2) == set(gen.parameters())


def test_no_specular_and_density_normals_drop_heads():
    gen = Generator(_net(specular="off", normal_source="density"), np.random.default_rng(0))
    assert gen.specular_head is None
    names = set(gen.trainable_parameters(2))
    assert not any(n.startswith(("specular.", "normal.", "feature.")) for n in names)
    m = gen.mapping_forward(np.zeros((1, 8)))
    assert gen.query(_points(1, 3), m).specular is None


def test_density_gradient_of_linear_field_is_exact():
    weights = Tensor(np.array([[1.0], [2.0], [3.0]]))
    grad = density_gradient(lambda p: p @ weights, Tensor(_points(2, 4)))
    assert grad.shape == (2, 4, 3)
    np.testing.assert_allclose(grad.data, np.broadcast_to([1.0, 2.0, 3.0], (2, 4, 3)), atol=1e-9)


def test_density_gradient_is_differentiable_in_parameters():
    gen = Generator(_net(hidden_dim=8), np.random.default_rng(3))
    z = np.random.default_rng(4).standard_normal((1, 8))
    pts = Tensor(_points(1, 3, seed=5) * 0.1)

    def loss():
        g = gen.density_gradient(pts, gen.mapping_forward(z), h=1e-3)
        return (g * g).sum()

    assert tc.gradcheck(loss, [gen.sigma_head.weight, gen.backbone[1].bias]) < 1e-5


def test_normalize_with_fallback_counts_degenerate_vectors(caplog):
    gen = Generator(_net(), np.random.default_rng(0))
    v = Tensor(np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]]))
    with caplog.at_level(logging.WARNING):
        unit, count = normalize_with_fallback(v, gen)
    assert count == 1 and gen.normal_fallbacks == 1
    np.testing.assert_allclose(unit.data, [NORMAL_FALLBACK, [0.6, 0.0, 0.8]])
    assert "fell back" in caplog.text


def test_normal_predict_returns_unit_vectors():
    gen = Generator(_net(), np.random.default_rng(0))
    normals, _ = gen.normal_predict(np.random.default_rng(1).uniform(size=(2, 3, 3, 4)))
    assert normals.shape == (2, 3, 3, 3)
    np.testing.assert_allclose(np.linalg.norm(normals.data, axis=-1), 1.0)
    with pytest.raises(ShapeError):
        gen.normal_predict(np.zeros((2, 3)))
