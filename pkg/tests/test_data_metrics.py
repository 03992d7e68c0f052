import json
import math

import numpy as np
import pytest

import data_metrics as dm
from run_config import build_config
from scene_sampling import CameraPose, LightCondition, generate_rays

FRONT = CameraPose(0.0, 0.0, 1.0)


def _cfg(**keys: str):
    flat = {"profile": "blob", "data.resolution": "16", "data.count": "3"}
    flat.update({k.replace("__", "."): v for k, v in keys.items()})
    return build_config(flat)


def test_sphere_center_depth_and_lambert():
    record = dm.render_analytic(dm.SyntheticScene(radius=0.5), FRONT, LightCondition.from_xy(0.0, 0.7, 0.0, 0.0),
                                9, 9)
    assert record.depth[4, 4] == pytest.approx(0.5)
    np.testing.assert_allclose(record.normal[4, 4], [0.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(record.image[4, 4], [0.7, 0.7, 0.7])
    assert record.mask[4, 4] and record.mask.dtype == bool


def test_background_where_rays_miss():
    record = dm.render_analytic(dm.SyntheticScene(radius=0.1), FRONT, LightCondition.from_xy(0.3, 0.7, 0.0, 0.0),
                                8, 8, background=(0.0, 0.5, 1.0))
    assert not record.mask[0, 0]
    np.testing.assert_array_equal(record.image[0, 0], [0.0, 0.5, 1.0])
    assert record.depth[0, 0] == dm.DEPTH_SENTINEL


def test_superellipsoid_hits_axis_point():
    scene = dm.SyntheticScene(shape="superellipsoid", radius=0.4, exponent=3.0)
    rays = generate_rays(FRONT, 1, 1, 10.0)
    t, n = scene.intersect(rays.origins, rays.directions)
    assert t[0] == pytest.approx(0.6, abs=1e-9)
    np.testing.assert_allclose(n[0], [0.0, 0.0, -1.0], atol=1e-9)
    with pytest.raises(ValueError):
        dm.SyntheticScene(shape="superellipsoid", exponent=1.5)


def test_mirror_dent_geometry():
    scene = dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3)
    rays = generate_rays(FRONT, 1, 1, 10.0)
    t, n = scene.intersect(rays.origins, rays.directions)
    depth = 2.0 * 0.5 * (1.0 - math.cos(0.3))
    assert scene.depth_of_dent == pytest.approx(depth)
    assert t[0] == pytest.approx(0.5 + depth)
    np.testing.assert_allclose(n[0], [0.0, 0.0, -1.0], atol=1e-12)
    assert not scene.inside(np.array([[0.0, 0.0, -0.49]]))[0]
    assert scene.inside(np.array([[0.0, 0.0, 0.49]]))[0]


def test_explicit_dent_depth():
    scene = dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3, dent_depth=0.1)
    assert scene.depth_of_dent == pytest.approx(0.1)
    rays = generate_rays(FRONT, 1, 1, 10.0)
    t, n = scene.intersect(rays.origins, rays.directions)
    assert t[0] == pytest.approx(0.6)
    np.testing.assert_allclose(n[0], [0.0, 0.0, -1.0], atol=1e-9)
    with pytest.raises(ValueError, match="shallow"):
        dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3, dent_depth=0.01)
    with pytest.raises(ValueError, match="diameter"):
        dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3, dent_depth=1.0)


def test_deep_dent_floor_mirrors_the_cap_normal():
    scene = dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3, dent_depth=0.1)
    rho = 0.1
    floor = np.array([[rho, 0.0, -(0.9 - math.sqrt(0.25 - rho * rho))]])
    n = scene.normal(floor)[0]
    np.testing.assert_allclose(n, [-rho / 0.5, 0.0, -math.sqrt(0.25 - rho * rho) / 0.5], atol=1e-12)
    assert not scene.inside(floor + np.array([0.0, 0.0, -1e-6]))[0]
    assert scene.inside(floor + np.array([0.0, 0.0, 1e-6]))[0]


def test_deep_dent_walls_face_away_from_the_camera():
    scene = dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3, dent_depth=0.1)
    rays = generate_rays(FRONT, 48, 48, 40.0)
    t, n = scene.intersect(rays.origins, rays.directions)
    hit = np.isfinite(t)
    assert hit.all()
    facing = np.einsum("ij,ij->i", n[hit], -rays.directions[hit])
    assert facing.min() > 0
    depth = np.linalg.norm(rays.origins + t[:, None] * rays.directions, axis=-1)
    assert (depth < 0.5 - 1e-3).any()


def test_two_tone_albedo_splits_on_x():
    scene = dm.SyntheticScene(albedo=np.array([0.1, 0.1, 0.1]), albedo2=np.array([0.9, 0.9, 0.9]))
    colors = scene.albedo_at(np.array([[-0.2, 0.0, 0.0], [0.2, 0.0, 0.0]]))
    np.testing.assert_allclose(colors, [[0.1] * 3, [0.9] * 3])


def test_dent_is_hidden_under_frontal_light():
    intact = dm.SyntheticScene(radius=0.5)
    dented = dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3, dent_depth=0.1)
    lights = (dm.oblique_light(0.0), dm.oblique_light(80.0))
    report = dm.dent_experiment(intact, dented, lights, size=64)
    assert report.oblique_difference > 0 and report.frontal_difference > 0
    assert report.ratio < 0.2
    swapped = dm.dent_experiment(intact, dented, lights[::-1], size=64)
    assert swapped.ratio == pytest.approx(1.0 / report.ratio)
    assert report.line().startswith("dent frontal_l2=")


def test_dent_sheet_is_written(tmp_path):
    intact = dm.SyntheticScene(radius=0.5)
    dented = dm.SyntheticScene(shape="dented", radius=0.5)
    dm.dent_experiment(intact, dented, (dm.oblique_light(0.0), dm.oblique_light(60.0)), size=16,
                       sheet=tmp_path / "sheet.png")
    assert dm.read_png(tmp_path / "sheet.png").shape == (32, 32, 3)


def test_dent_report_ratio_edge_cases():
    assert dm.DentReport(0.0, 0.0).ratio == 1.0
    assert dm.DentReport(1.0, 0.0).ratio == math.inf
    assert dm.DentReport(1.0, 4.0).ratio == 0.25


def test_side_metric_cases():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.5, 2.0, (6, 6))
    mask = np.ones_like(d, dtype=bool)
    assert dm.side(d, d, mask) == pytest.approx(0.0, abs=1e-12)
    assert dm.side(3.0 * d, d, mask) == pytest.approx(0.0, abs=1e-12)
    assert dm.side(np.array([1.0, 2.0]), np.ones(2), np.ones(2, dtype=bool)) == pytest.approx(math.log(2) / 2)
    # pixels outside the mask are ignored, even non-positive ones
    assert dm.side(np.array([1.0, 2.0, -1.0]), np.ones(3), np.array([True, True, False])) == pytest.approx(
        math.log(2) / 2)
    with pytest.raises(ValueError, match="mask"):
        dm.side(d, d, np.zeros_like(mask))
    with pytest.raises(ValueError, match="positive"):
        dm.side(np.zeros(2), np.ones(2), np.ones(2, dtype=bool))


def test_frechet_distance_closed_forms():
    assert dm.frechet_distance(0.0, 1.0, 3.0, 1.0) == pytest.approx(9.0)
    assert dm.frechet_distance(0.0, 1.0, 0.0, 4.0) == pytest.approx(1.0)
    assert dm.frechet_distance(np.zeros(2), np.eye(2), np.ones(2), np.eye(2)) == pytest.approx(2.0)


def test_pixel_frechet_of_a_set_with_itself_is_zero():
    images = np.random.default_rng(1).uniform(0.0, 1.0, (10, 16, 16, 3))
    assert dm.pixel_frechet(images, images) == pytest.approx(0.0, abs=1e-5)
    assert dm.pixel_frechet(images, 1.0 - images * 0.2) > 0.1
    with pytest.raises(ValueError, match="2 images"):
        dm.pixel_frechet(images[:1], images)


def test_downsample_averages_blocks():
    images = np.arange(16.0).reshape(1, 4, 4, 1).repeat(4, axis=1).repeat(4, axis=2)
    small = dm.downsample(np.broadcast_to(images, (2, 16, 16, 1)), 4)
    assert small.shape == (2, 4, 4, 1)
    np.testing.assert_allclose(small[0, :, :, 0], np.arange(16.0).reshape(4, 4))


def test_png_round_trip(tmp_path):
    image = np.random.default_rng(2).uniform(0.0, 1.0, (5, 7, 3))
    dm.write_png(image, tmp_path / "x.png")
    np.testing.assert_allclose(dm.read_png(tmp_path / "x.png"), image, atol=0.5 / 255 + 1e-9)


def test_dataset_is_deterministic_across_threads(tmp_path):
    cfg = _cfg()
    dm.make_dataset(cfg, tmp_path / "a", seed=11)
    dm.make_dataset(cfg, tmp_path / "b", seed=11, threads=3)
    a = json.loads((tmp_path / "a" / "manifest.json").read_text(encoding="utf-8"))
    b = json.loads((tmp_path / "b" / "manifest.json").read_text(encoding="utf-8"))
    assert a == b and a["count"] == 3 and a["format"] == dm.DATASET_FORMAT
    for record in a["records"]:
        name = f"images/{record['id']}.png"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not list((tmp_path / "a").glob("*.tmp"))


def test_load_dataset_exposes_images_and_ground_truth(tmp_path):
    dm.make_dataset(_cfg(), tmp_path / "d", n=2, seed=3)
    data = dm.load_dataset(tmp_path / "d")
    assert len(data) == 2 and data.images.shape == (2, 16, 16, 3)
    depth = data.ground_truth(1, "depth")
    mask = data.ground_truth(1, "mask").astype(bool)
    assert depth.shape == (16, 16)
    assert np.all(depth[mask] > 0)
    assert isinstance(data.camera(0), CameraPose)
    assert len(dm.load_dataset(tmp_path / "d", limit=1)) == 1
    (tmp_path / "d" / "manifest.json").write_text('{"format": "other"}', encoding="utf-8")
    with pytest.raises(ValueError, match="manifest"):
        dm.load_dataset(tmp_path / "d")


def test_zero_pose_spread_gives_identical_masks(tmp_path):
    cfg = _cfg(camera__sigma_v="0.0", camera__sigma_h="0.0", data__shapes="sphere",
               data__radius_min="0.4", data__radius_max="0.4")
    data = dm.load_dataset(dm.make_dataset(cfg, tmp_path / "d", seed=5).parent)
    masks = [data.ground_truth(i, "mask") for i in range(len(data))]
    assert masks[0].any()
    for m in masks[1:]:
        np.testing.assert_array_equal(m, masks[0])


def test_random_scene_without_specular():
    scene = dm.random_scene(np.random.default_rng(0), _cfg(net__specular="off"))
    assert scene.specular == (0.0, 0.0)
    assert 0.35 <= scene.radius <= 0.45


def test_shell_depths_sample_far_on_miss():
    scene = dm.SyntheticScene(radius=0.1)
    rays = generate_rays(FRONT, 5, 5, 40.0)
    samples = dm.shell_depths(scene, 0.0, 2.0)(rays.origins[None], rays.directions[None])
    assert samples.depths.shape == (1, 25, 2)
    assert samples.depths[0, 0, 0] == 2.0
    assert samples.depths[0, 12, 0] == pytest.approx(0.9 + 0.5e-4)


def test_analytic_field_kinds():
    points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.9]])
    blob = dm.AnalyticField(kind="blob", peak=10.0, width=0.25)
    np.testing.assert_allclose(blob.density_values(points)[:2], [10.0, 10.0 * math.exp(-2.0)])
    smooth = dm.AnalyticField(kind="smooth-sphere", peak=100.0, width=0.1)
    assert smooth.density_values(points)[1] == pytest.approx(50.0)
    solid = dm.AnalyticField(kind="solid", sigma=3.0)
    np.testing.assert_array_equal(solid.density_values(points), [3.0, 3.0, 0.0])
    assert solid.density(points[None]).shape == (1, 3, 1)
    with pytest.raises(ValueError):
        dm.AnalyticField(kind="cloud")
