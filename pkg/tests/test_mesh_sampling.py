"""Tests for mesh sampling and point-to-mesh distance"""

import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from pcdenoise.core.errors import InvalidArgumentError
from pcdenoise.core.geometry import PointCloud
from pcdenoise.core.mesh_sampling import (
    Mesh,
    MeshBVH,
    area_uniform_sample,
    hexagonal_spacing,
    point_to_mesh,
    point_to_mesh_exhaustive,
    poisson_disk_sample,
    poisson_disk_sample_with_provenance,
)


def unit_square() -> Mesh:
    vertices = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]])
    return Mesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


def random_mesh(rng: np.random.Generator, n_triangles: int) -> Mesh:
    """独立な三角形の集まり（退化三角形は実質発生しない）"""
    vertices = rng.random((3 * n_triangles, 3))
    return Mesh(vertices, np.arange(3 * n_triangles).reshape(-1, 3))


def test_mesh_validation():
    """範囲外の添字・重複頂点・面積ゼロは invalid-argument"""
    vertices = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    with pytest.raises(InvalidArgumentError):
        Mesh(vertices, np.array([[0, 1, 3]]))
    with pytest.raises(InvalidArgumentError):
        Mesh(vertices, np.array([[0, 1, 1]]))
    with pytest.raises(InvalidArgumentError):
        Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]), np.array([[0, 1, 2]]))

    mesh = unit_square()
    assert mesh.total_area == pytest.approx(1.0)


def test_mesh_from_obj_file(tmp_path):
    path = tmp_path / "square.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = Mesh.from_file(path)

    assert mesh.triangles.shape == (2, 3)
    assert mesh.total_area == pytest.approx(1.0)


def test_area_uniform_sample_barycentric_invariant():
    mesh = random_mesh(np.random.default_rng(0), 20)
    sampled = area_uniform_sample(mesh, 2000, seed=1)

    assert sampled.cloud.n == 2000
    np.testing.assert_allclose(sampled.barycentric.sum(axis=1), 1.0)
    assert np.all(sampled.barycentric >= 0)
    rebuilt = np.einsum("ij,ijk->ik", sampled.barycentric, mesh.corners[sampled.triangle_ids])
    np.testing.assert_allclose(sampled.cloud.points, rebuilt, atol=1e-6)


def test_area_uniform_sample_centroid():
    """単位直角三角形の標本重心は (1/3, 1/3) に一致する"""
    mesh = Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]), np.array([[0, 1, 2]]))
    sampled = area_uniform_sample(mesh, 10_000, seed=2)

    # 一様三角形上の座標の分散は 1/18
    sigma = np.sqrt(1.0 / 18.0 / 10_000)
    centroid = sampled.cloud.points.mean(axis=0)
    assert abs(centroid[0] - 1.0 / 3.0) < 4 * sigma
    assert abs(centroid[1] - 1.0 / 3.0) < 4 * sigma


def test_area_uniform_sample_follows_area():
    """面積比 4:1 の三角形2枚 → 標本数比 4:1"""
    vertices = np.array([
        [0.0, 0, 0], [2.0, 0, 0], [0.0, 2, 0],
        [5.0, 0, 0], [6.0, 0, 0], [5.0, 1, 0],
    ])
    mesh = Mesh(vertices, np.array([[0, 1, 2], [3, 4, 5]]))
    sampled = area_uniform_sample(mesh, 10_000, seed=3)

    count_large = int(np.sum(sampled.triangle_ids == 0))
    sigma = np.sqrt(10_000 * 0.8 * 0.2)
    assert abs(count_large - 8000) < 4 * sigma


def test_area_uniform_sample_rejects_zero_count():
    with pytest.raises(InvalidArgumentError):
        area_uniform_sample(unit_square(), 0, seed=0)


@pytest.mark.parametrize("seed", range(10))
def test_poisson_disk_minimum_spacing(seed):
    """単位正方形・m=100 → 最小点間距離 ≥ 0.5 × 六方充填推定"""
    cloud = poisson_disk_sample(unit_square(), 100, seed=seed)

    assert cloud.n == 100
    assert pdist(cloud.points).min() >= 0.5 * hexagonal_spacing(1.0, 100)


def test_poisson_disk_single_sample_and_determinism():
    mesh = unit_square()
    single = poisson_disk_sample_with_provenance(mesh, 1, seed=5)
    assert single.cloud.n == 1
    rebuilt = np.einsum("ij,ijk->ik", single.barycentric, mesh.corners[single.triangle_ids])
    np.testing.assert_allclose(single.cloud.points, rebuilt, atol=1e-6)

    first = poisson_disk_sample(mesh, 300, seed=6)
    second = poisson_disk_sample(mesh, 300, seed=6)
    assert first.points.tobytes() == second.points.tobytes()


def test_poisson_disk_spacing_beats_uniform_sampling():
    """ランダムメッシュ10個中9個以上でポアソンディスクの最小距離が一様標本より大きい"""
    rng = np.random.default_rng(7)
    wins = 0
    for trial in range(10):
        mesh = random_mesh(rng, 8)
        blue = poisson_disk_sample(mesh, 200, seed=trial)
        white = area_uniform_sample(mesh, 200, seed=100 + trial).cloud
        wins += pdist(blue.points).min() > pdist(white.points).min()
    assert wins >= 9


def test_point_to_mesh_on_surface_is_zero():
    rng = np.random.default_rng(8)
    for _ in range(10):
        mesh = random_mesh(rng, 30)
        samples = area_uniform_sample(mesh, 200, seed=int(rng.integers(1_000))).cloud
        assert point_to_mesh(samples, mesh) <= 1e-10


def test_point_to_mesh_height_above_face():
    """大きな三角形の内部から高さ h の点 → h²"""
    mesh = Mesh(np.array([[-10.0, -10, 0], [10.0, -10, 0], [0.0, 10, 0]]), np.array([[0, 1, 2]]))
    cloud = PointCloud(np.array([[0.0, 0.0, 0.3]]))
    assert point_to_mesh(cloud, mesh) == pytest.approx(0.09, abs=1e-12)


def test_point_to_mesh_beyond_edge():
    """辺の外側の点は辺までの二乗距離"""
    mesh = Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]), np.array([[0, 1, 2]]))
    cloud = PointCloud(np.array([[0.5, -1.0, 0.5]]))

    assert point_to_mesh(cloud, mesh) == pytest.approx(1.25, abs=1e-12)
    assert point_to_mesh_exhaustive(cloud, mesh) == pytest.approx(1.25, abs=1e-12)


def test_bvh_matches_exhaustive_scan():
    """BVH 版と総当たり版が 50 組で 1e-9 以内に一致"""
    rng = np.random.default_rng(9)
    for _ in range(50):
        mesh = random_mesh(rng, int(rng.integers(1, 513)))
        cloud = PointCloud(rng.random((int(rng.integers(1, 129)), 3)) * 1.6 - 0.3)
        bvh = MeshBVH(mesh, leaf_size=int(rng.integers(1, 9)))
        assert point_to_mesh(cloud, mesh, bvh) == pytest.approx(point_to_mesh_exhaustive(cloud, mesh), abs=1e-9)


def test_point_to_mesh_rigid_invariance():
    rng = np.random.default_rng(10)
    mesh = random_mesh(rng, 40)
    cloud = PointCloud(rng.random((64, 3)))
    rotation = Rotation.random(random_state=11).as_matrix()
    translation = np.array([3.0, -2.0, 0.5])

    moved = PointCloud(cloud.points @ rotation.T + translation)
    before = point_to_mesh(cloud, mesh)
    after = point_to_mesh(moved, mesh.transformed(rotation, translation))
    assert after == pytest.approx(before, abs=1e-9)
