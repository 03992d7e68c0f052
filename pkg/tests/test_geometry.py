from pathlib import Path

import numpy as np
import pytest

import data_metrics as dm
import geometry
from geometry import (
    DensityGrid,
    TexturedMesh,
    eval_density_grid,
    export_mesh,
    lattice_points,
    load_mesh,
    marching_cubes,
    relight_preview,
    texture_mesh,
    threshold_sweep,
    write_sweep_csv,
)
from scene_sampling import CameraPose, LightCondition

GOLDEN = Path(__file__).resolve().parent / "golden"
CUBE_FACES = np.array([[0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
                       [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5]])
FRONTAL_CAMERA = CameraPose(0.0, 0.0, 1.0)


def _unit_cube() -> TexturedMesh:
    corners = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=np.float64)
    return TexturedMesh(corners, CUBE_FACES.copy(), corners.copy())


def _small_cube(albedo: float = 0.5) -> TexturedMesh:
    cube = _unit_cube()
    return TexturedMesh((cube.vertices - 0.5) * 0.5, cube.faces, np.full((8, 3), albedo))


def _sphere_grid(resolution: int, radius: float = 0.5, bound: float = 0.8) -> DensityGrid:
    points = lattice_points(resolution, bound)
    return DensityGrid.cube(radius - np.linalg.norm(points, axis=-1), bound)


def _edge_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    _, undirected = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
    _, oriented = np.unique(directed, axis=0, return_counts=True)
    return undirected, oriented


def test_grid_rejects_bad_shapes_and_values():
    with pytest.raises(ValueError, match="cubic"):
        DensityGrid.cube(np.zeros((4, 4, 5)), 1.0)
    values = np.zeros((4, 4, 4))
    values[1, 2, 3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        DensityGrid.cube(values, 1.0)


def test_no_crossing_gives_empty_mesh():
    grid = DensityGrid.cube(np.full((8, 8, 8), 10.0), 1.0)
    assert marching_cubes(grid, 50.0).is_empty
    assert marching_cubes(grid, 5.0).is_empty


def test_sphere_is_watertight_and_outward():
    grid = _sphere_grid(64)
    mesh = marching_cubes(grid, 0.0)
    mesh.validate()
    voxel = 1.6 / 63
    radii = np.linalg.norm(mesh.vertices, axis=-1)
    assert np.all(np.abs(radii - 0.5) <= 1.5 * voxel)
    undirected, oriented = _edge_counts(mesh.faces)
    assert np.all(undirected == 2)
    assert np.all(oriented == 1)
    tri = mesh.vertices[mesh.faces]
    volume = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    assert volume == pytest.approx(4.0 / 3.0 * np.pi * 0.125, rel=0.01)


def test_plane_vertices_lie_on_the_plane():
    normal = np.array([0.3, 0.4, 0.5])
    grid = DensityGrid.cube(lattice_points(16, 1.0) @ normal, 1.0)
    mesh = marching_cubes(grid, 0.1)
    assert not mesh.is_empty
    assert np.abs(mesh.vertices @ normal - 0.1).max() < 1e-9
    tri = mesh.vertices[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    assert np.all(cross @ -normal > 0)


def test_sphere_sweep_never_gains_vertices():
    field = dm.AnalyticField(kind="smooth-sphere", peak=100.0, width=0.02)
    grid = DensityGrid.cube(field.density_values(lattice_points(64, 0.8)), 0.8)
    thresholds = [float(t) for t in range(10, 201, 10)]
    vertices = [row[1] for row in threshold_sweep(grid, thresholds)]
    assert all(a >= b for a, b in zip(vertices, vertices[1:]))
    assert vertices[0] > vertices[8] > 0
    assert vertices[9:] == [0] * 11


def test_threshold_sweep_shrinks_blob(tmp_path):
    field = dm.AnalyticField(kind="blob")
    grid = eval_density_grid(field, np.zeros(1), 33, 0.8)
    rows = threshold_sweep(grid, [5.0, 20.0, 50.0, 80.0])
    assert [r[0] for r in rows] == [5.0, 20.0, 50.0, 80.0]
    vertices = [r[1] for r in rows]
    assert vertices == sorted(vertices, reverse=True) and len(set(vertices)) == 4
    write_sweep_csv(rows, tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "threshold,vertices,triangles"
    assert len(lines) == 5


def test_doubled_grid_nests_the_coarse_lattice():
    field = dm.AnalyticField(kind="smooth-sphere", width=0.05)
    coarse = eval_density_grid(field, np.zeros(1), 9, 0.8)
    fine = eval_density_grid(field, np.zeros(1), 17, 0.8, chunk=100, threads=2)
    np.testing.assert_allclose(fine.values[::2, ::2, ::2], coarse.values, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fine.lattice()[::2, ::2, ::2], coarse.lattice(), atol=1e-15)
    with pytest.raises(ValueError):
        eval_density_grid(field, np.zeros(1), 4, 0.8)


def test_texture_samples_albedo_and_radial_normals():
    scene = dm.SyntheticScene(albedo=np.array([0.2, 0.4, 0.6]))
    field = dm.AnalyticField(scene, kind="smooth-sphere", width=0.02)
    mesh = marching_cubes(eval_density_grid(field, np.zeros(1), 24, 0.8), 50.0)
    textured = texture_mesh(mesh, field, np.zeros(1), chunk=500)
    np.testing.assert_allclose(textured.colors, np.broadcast_to([0.2, 0.4, 0.6], textured.colors.shape))
    radial = textured.vertices / np.linalg.norm(textured.vertices, axis=-1, keepdims=True)
    assert np.einsum("ij,ij->i", textured.normals, radial).min() > 0.999
    with pytest.raises(ValueError, match="empty"):
        texture_mesh(TexturedMesh.empty(), field, np.zeros(1))


def test_golden_unit_cube_obj(tmp_path):
    path = export_mesh(_unit_cube(), tmp_path / "cube.obj")
    assert path.read_text(encoding="utf-8") == (GOLDEN / "unit_cube.obj").read_text(encoding="utf-8")
    assert not list(tmp_path.glob("*.tmp"))


def test_obj_and_ply_round_trip(tmp_path):
    mesh = marching_cubes(_sphere_grid(12), 0.0)
    rng = np.random.default_rng(0)
    mesh.colors = rng.uniform(0.0, 1.0, mesh.vertices.shape)
    mesh.normals = mesh.vertices / np.linalg.norm(mesh.vertices, axis=-1, keepdims=True)

    obj = load_mesh(export_mesh(mesh, tmp_path / "m.obj"))
    np.testing.assert_array_equal(obj.faces, mesh.faces)
    np.testing.assert_allclose(obj.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_allclose(obj.colors, mesh.colors, atol=1e-6)
    np.testing.assert_allclose(obj.normals, mesh.normals, atol=1e-6)

    ply = load_mesh(export_mesh(mesh, tmp_path / "m.ply"))
    np.testing.assert_array_equal(ply.faces, mesh.faces)
    np.testing.assert_allclose(ply.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_allclose(ply.colors, mesh.colors, atol=0.5 / 255 + 1e-9)
    np.testing.assert_allclose(ply.normals, mesh.normals, atol=1e-6)


def test_empty_mesh_exports(tmp_path):
    for name in ("e.obj", "e.ply"):
        loaded = load_mesh(export_mesh(TexturedMesh.empty(), tmp_path / name))
        assert loaded.is_empty and len(loaded.vertices) == 0
    with pytest.raises(ValueError, match="format"):
        export_mesh(TexturedMesh.empty(), tmp_path / "e.stl")


def test_relight_empty_mesh_is_background():
    image = relight_preview(TexturedMesh.empty(), FRONTAL_CAMERA, LightCondition.from_xy(0.3, 0.7, 0.0, 0.0),
                            6, 4, background=(0.1, 0.2, 0.3))
    assert image.shape == (4, 6, 3)
    np.testing.assert_array_equal(image, np.broadcast_to([0.1, 0.2, 0.3], (4, 6, 3)))


def test_relight_front_face_is_lambertian():
    light = LightCondition.from_xy(0.1, 0.6, 0.0, 0.0)
    image = relight_preview(_small_cube(0.5), FRONTAL_CAMERA, light, 5, 5, fov_deg=60.0, clamp=False)
    np.testing.assert_allclose(image[2, 3], 0.5 * (0.1 + 0.6))
    np.testing.assert_array_equal(image[0, 0], [1.0, 1.0, 1.0])


def test_relight_ambient_offset_and_kd_zero_invariance():
    cube = _small_cube(0.5)
    dim = relight_preview(cube, FRONTAL_CAMERA, LightCondition.from_xy(0.0, 0.5, 0.3, 0.2), 9, 9, clamp=False)
    lit = relight_preview(cube, FRONTAL_CAMERA, LightCondition.from_xy(0.2, 0.5, 0.3, 0.2), 9, 9, clamp=False)
    hit = np.any(dim != 1.0, axis=-1)
    assert hit.any()
    np.testing.assert_allclose((lit - dim)[hit], 0.1)
    flat_a = relight_preview(cube, FRONTAL_CAMERA, LightCondition.from_xy(0.4, 0.0, 0.5, 0.0), 9, 9,
                             specular=(0.5, 0.5))
    flat_b = relight_preview(cube, FRONTAL_CAMERA, LightCondition.from_xy(0.4, 0.0, -0.5, 0.3), 9, 9,
                             specular=(0.5, 0.5))
    np.testing.assert_array_equal(flat_a, flat_b)


def test_relight_sphere_matches_closed_form():
    mesh = marching_cubes(_sphere_grid(41), 0.0)
    mesh.colors = np.ones_like(mesh.vertices)
    mesh.normals = mesh.vertices / np.linalg.norm(mesh.vertices, axis=-1, keepdims=True)
    light = LightCondition.from_xy(0.1, 0.8, 0.3, 0.2)
    image = relight_preview(mesh, FRONTAL_CAMERA, light, 32, 32, specular=(0.0, 1.0))
    expected = dm.render_analytic(dm.SyntheticScene(radius=0.5), FRONTAL_CAMERA, light, 32, 32)
    facing = expected.mask & (expected.normal[..., 2] < -0.5)
    assert facing.sum() > 100
    assert np.abs(image[facing] - expected.image[facing]).max() < 0.05


def test_tiled_and_brute_force_hits_agree(monkeypatch):
    mesh = marching_cubes(_sphere_grid(17), 0.0)
    light = LightCondition.from_xy(0.2, 0.7, -0.2, 0.1)
    brute = relight_preview(mesh, FRONTAL_CAMERA, light, 20, 20)
    monkeypatch.setattr(geometry, "BRUTE_FORCE_LIMIT", 1)
    tiled = relight_preview(mesh, FRONTAL_CAMERA, light, 20, 20)
    np.testing.assert_allclose(tiled, brute, atol=1e-12)
