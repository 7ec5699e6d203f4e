import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svrecon.field import AnalyticField, extract_sdf_grid
from svrecon.metrics import (MetricError, PointSample, TriangleMesh, VoxelGrid, chamfer_bruteforce,
                             chamfer_distance, evaluate_meshes, f_score, iou, marching_cubes, nearest,
                             nearest_bruteforce, normal_consistency, normal_consistency_bruteforce, psnr,
                             sample_surface, voxelize_mesh, voxelize_sdf)
from svrecon.scene import Sphere, default_scene

BOX = ([-1.5] * 3, [1.5] * 3)


@pytest.fixture(scope="module")
def sphere_mesh():
    grid = extract_sdf_grid(AnalyticField(Sphere()), None, BOX, 64)
    return marching_cubes(grid, BOX)


# marching cubes --------------------------------------------------------------------------

def test_all_positive_grid_is_empty():
    assert marching_cubes(np.ones((8, 8, 8)), BOX).empty


def test_sphere_area_volume_watertight(sphere_mesh):
    assert abs(sphere_mesh.area() / (4 * np.pi) - 1) < 0.02
    assert abs(sphere_mesh.volume() / (4 * np.pi / 3) - 1) < 0.02
    assert sphere_mesh.is_watertight()


def test_triangles_face_outward(sphere_mesh):
    v = sphere_mesh.vertices[sphere_mesh.faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", sphere_mesh.face_normals(), v) > 0)


def test_default_scene_watertight():
    grid = extract_sdf_grid(AnalyticField(default_scene()), None, BOX, 48)
    m = marching_cubes(grid, BOX)
    assert m.is_watertight()
    assert m.volume() > 0


def test_marching_cubes_rejects_flat_grid():
    with pytest.raises(MetricError):
        marching_cubes(np.ones((1, 4, 4)), BOX)


# sampling --------------------------------------------------------------------------------

def test_single_triangle_samples_inside(rng):
    tri = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    s = sample_surface(tri, 2000, rng)
    x, y, z = s.points.T
    assert np.all((x >= 0) & (y >= 0) & (x + y <= 1 + 1e-12) & (z == 0))
    np.testing.assert_allclose(np.abs(s.normals[:, 2]), 1.0)


def test_area_weighted_ratio(rng):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0.0]])
    mesh = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))  # areas 1 and 3
    s = sample_surface(mesh, 10_000, rng)
    n_small = (s.points[:, 0] < 5).sum()
    assert abs((10_000 - n_small) / n_small - 3) < 0.15


def test_sphere_samples_on_unit_sphere(sphere_mesh, rng):
    s = sample_surface(sphere_mesh, 5000, rng)
    assert abs(np.linalg.norm(s.points, axis=1).mean() - 1) < 0.01


def test_sample_errors():
    with pytest.raises(MetricError):
        sample_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 10)


# distances --------------------------------------------------------------------------------

def test_chamfer_examples(rng):
    a = rng.normal(size=(100, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    with pytest.raises(MetricError):
        chamfer_distance(np.zeros((0, 3)), a)


@pytest.mark.parametrize("seed", range(5))
def test_kdtree_equals_bruteforce(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(500, 3)), r.normal(size=(500, 3))
    assert abs(chamfer_distance(a, b) - chamfer_bruteforce(a, b)) < 1e-9
    q, ref = r.uniform(size=(2000, 3)), r.uniform(size=(1500, 3))
    d1, i1 = nearest(q, ref)
    d2, _ = nearest_bruteforce(q, ref)
    np.testing.assert_allclose(d1, d2, atol=1e-9)
    na, nb = r.normal(size=(500, 3)), r.normal(size=(500, 3))
    pa = PointSample(a, na / np.linalg.norm(na, axis=1, keepdims=True))
    pb = PointSample(b, nb / np.linalg.norm(nb, axis=1, keepdims=True))
    assert abs(normal_consistency(pa, pb) - normal_consistency_bruteforce(pa, pb)) < 1e-12


def test_fscore_examples():
    line = np.stack([np.arange(10) * 1.0, np.zeros(10), np.zeros(10)], axis=1)
    assert f_score(line, line, 0.01) == 1.0
    assert f_score(line, line + [0, 5, 0], 0.1) == 0.0
    assert f_score(line, line + [0, 0.005, 0], 0.01) == 1.0
    with pytest.raises(MetricError):
        f_score(line, line, 0.0)


def test_normal_consistency_examples(rng):
    p = rng.normal(size=(50, 3))
    n = np.tile([0.0, 0.0, 1.0], (50, 1))
    assert normal_consistency(PointSample(p, n), PointSample(p, n)) == 1.0
    rot = np.tile([1.0, 0.0, 0.0], (50, 1))
    assert normal_consistency(PointSample(p, n), PointSample(p, rot)) == 0.0
    assert normal_consistency(PointSample(p, n), PointSample(p, -n)) == 1.0
    with pytest.raises(MetricError):
        normal_consistency(PointSample(p), PointSample(p, n))


@given(st.integers(0, 1000))
def test_property_symmetry(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(40, 3)), r.normal(size=(60, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)
    assert f_score(a, b, 0.5) == pytest.approx(f_score(b, a, 0.5), rel=1e-12)
    na = PointSample(a, r.normal(size=(40, 3)))
    nb = PointSample(b, r.normal(size=(60, 3)))
    assert normal_consistency(na, nb) == pytest.approx(normal_consistency(nb, na), rel=1e-12)
    assert chamfer_distance(a, b) > 0


# psnr / iou -------------------------------------------------------------------------------

def test_psnr_examples(rng):
    img = rng.uniform(size=(8, 8, 3))
    assert psnr(img, img) == 99.0
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    gray = np.full((200, 200), 0.5)
    noise = rng.uniform(-0.1, 0.1, size=gray.shape)
    assert abs(psnr(gray, gray + noise) - 10 * np.log10(1 / (0.2 ** 2 / 12))) < 0.5
    with pytest.raises(MetricError):
        psnr(np.zeros((2, 2)), np.zeros((3, 2)))


def test_iou_examples():
    a = np.zeros((8, 8, 8), bool)
    a[:4] = True
    ga = VoxelGrid.from_occupancy(a)
    assert iou(ga, ga) == 1.0
    assert iou(ga, VoxelGrid.from_occupancy(~a)) == 0.0
    empty = VoxelGrid.from_occupancy(np.zeros((8, 8, 8), bool))
    assert iou(empty, empty) == 1.0
    with pytest.raises(MetricError):
        iou(ga, VoxelGrid.from_occupancy(np.zeros((4, 4, 4), bool)))
    with pytest.raises(MetricError):
        VoxelGrid.from_occupancy(np.zeros((4, 4, 5)))
    with pytest.raises(MetricError):
        VoxelGrid(4, ((0, 0, 0), (1, 0, 1)), np.zeros((4, 4, 4), bool))


def test_nested_sphere_iou():
    a = voxelize_sdf(Sphere(radius=1.0), BOX, 64)
    b = voxelize_sdf(Sphere(radius=0.8), BOX, 64)
    assert abs(iou(a, b) / 0.512 - 1) < 0.05


def test_voxelize_mesh_matches_sdf(sphere_mesh):
    a = voxelize_mesh(sphere_mesh, BOX, 32)
    b = voxelize_sdf(Sphere(), BOX, 32)
    assert iou(a, b) > 0.97


# end to end -------------------------------------------------------------------------------

def test_evaluate_identity_and_empty(sphere_mesh):
    r = evaluate_meshes(sphere_mesh, sphere_mesh, n_points=2000)
    assert r == {"cd": 0.0, "cd_x1000": 0.0, "fscore": 1.0, "nc": 1.0}
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    assert evaluate_meshes(empty, sphere_mesh)["fscore"] == 0.0
    with pytest.raises(MetricError):
        evaluate_meshes(sphere_mesh, empty)


def test_evaluate_shrunken_sphere(sphere_mesh):
    small = TriangleMesh(sphere_mesh.vertices * 0.95, sphere_mesh.faces)
    r = evaluate_meshes(small, sphere_mesh, n_points=20000)
    # radius gap 0.05 on a diagonal of 2*sqrt(3): each direction contributes about 0.05 / 3.46
    assert r["cd"] == pytest.approx(2 * 0.05 / (2 * np.sqrt(3)), rel=0.25)
    assert r["nc"] > 0.95
