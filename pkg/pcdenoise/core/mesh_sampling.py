"""Triangle meshes: blue-noise surface sampling and point-to-mesh distance"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union
import heapq
import logging
import math

import numpy as np
from scipy.spatial import cKDTree
from trimesh.triangles import closest_point as closest_point_on_triangles

from pcdenoise.core.errors import InvalidArgumentError, InvalidStateError
from pcdenoise.core.geometry import PointCloud
from pcdenoise.core.pointio import load_mesh_arrays

logger = logging.getLogger(__name__)

POOL_FACTOR = 4
ELIMINATION_EXPONENT = 8


@dataclass(frozen=True)
class Mesh:
    """Indexed triangle soup"""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        triangles = np.asarray(self.triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] == 0:
            raise InvalidArgumentError("mesh vertices must be a non-empty (V, 3) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or triangles.shape[0] == 0:
            raise InvalidArgumentError("mesh triangles must be a non-empty (F, 3) array")
        if not np.all(np.isfinite(vertices)):
            raise InvalidArgumentError("mesh vertices contain NaN or Inf")
        if triangles.min() < 0 or triangles.max() >= vertices.shape[0]:
            raise InvalidArgumentError("triangle index out of range", n_vertices=vertices.shape[0])
        repeated = (
            (triangles[:, 0] == triangles[:, 1])
            | (triangles[:, 1] == triangles[:, 2])
            | (triangles[:, 0] == triangles[:, 2])
        )
        if repeated.any():
            raise InvalidArgumentError(
                "triangle with repeated vertices", triangle=int(np.flatnonzero(repeated)[0])
            )
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        if self.total_area <= 0:
            raise InvalidArgumentError("mesh has zero surface area")

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Mesh":
        vertices, triangles = load_mesh_arrays(path)
        return cls(vertices, triangles)

    @property
    def corners(self) -> np.ndarray:
        """(F, 3, 3) triangle corner positions"""
        return self.vertices[self.triangles]

    @property
    def areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Mesh":
        return Mesh(self.vertices @ np.asarray(rotation).T + translation, self.triangles)


@dataclass(frozen=True)
class SampledCloud:
    """Surface samples with their triangle and barycentric provenance"""

    cloud: PointCloud
    triangle_ids: np.ndarray
    barycentric: np.ndarray


def area_uniform_sample(mesh: Mesh, m: int, seed: int) -> SampledCloud:
    """
    Area-weighted uniform surface samples

    Triangles are drawn proportionally to area; positions inside a triangle use the
    square-root barycentric warp.

    Args:
        mesh: Source mesh
        m: Sample count (>= 1)
        seed: RNG seed

    Returns:
        SampledCloud with m points
    """
    if m < 1:
        raise InvalidArgumentError("sample count must be >= 1", m=m)
    rng = np.random.default_rng(seed)
    areas = mesh.areas
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    tri = np.searchsorted(cdf, rng.random(m), side="right")
    tri = np.minimum(tri, len(areas) - 1)

    r1, r2 = rng.random((2, m))
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    points = np.einsum("ij,ijk->ik", bary, mesh.corners[tri])
    return SampledCloud(PointCloud(points), tri.astype(np.int64), bary)


def hexagonal_spacing(area: float, m: int) -> float:
    """Spacing estimate of m points packed over a surface of the given area"""
    return math.sqrt(area / (m * (math.sqrt(3.0) / 2.0) * (math.pi / 4.0)))


def _eliminate(points: np.ndarray, m: int, r_max: float) -> np.ndarray:
    """Weighted sample elimination down to m survivors; returns ascending pool indices"""
    n = points.shape[0]
    tree = cKDTree(points)
    reach = 2.0 * r_max
    pairs = tree.query_pairs(reach, output_type="ndarray")

    weights = np.zeros(n)
    neighbors = [[] for _ in range(n)]
    if pairs.size:
        d = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
        w = (1.0 - d / reach) ** ELIMINATION_EXPONENT
        np.add.at(weights, pairs[:, 0], w)
        np.add.at(weights, pairs[:, 1], w)
        for (i, j), wij in zip(pairs.tolist(), w.tolist()):
            neighbors[i].append((j, wij))
            neighbors[j].append((i, wij))

    alive = np.ones(n, dtype=bool)
    heap = [(-weights[i], i) for i in range(n)]
    heapq.heapify(heap)
    remaining = n
    while remaining > m:
        neg_w, i = heapq.heappop(heap)
        if not alive[i] or -neg_w != weights[i]:
            continue
        alive[i] = False
        remaining -= 1
        for j, wij in neighbors[i]:
            if alive[j]:
                weights[j] -= wij
                heapq.heappush(heap, (-weights[j], j))
    return np.flatnonzero(alive)


def poisson_disk_sample_with_provenance(mesh: Mesh, m: int, seed: int) -> SampledCloud:
    """Poisson-disk samples with triangle and barycentric provenance"""
    if m < 1:
        raise InvalidArgumentError("sample count must be >= 1", m=m)
    pool = area_uniform_sample(mesh, POOL_FACTOR * m, seed)
    if pool.cloud.n < m:
        raise InvalidStateError("sample pool smaller than the requested count", pool=pool.cloud.n, m=m)

    r_max = math.sqrt(mesh.total_area / (2.0 * math.sqrt(3.0) * m))
    keep = _eliminate(pool.cloud.points, m, r_max)
    logger.debug(f"poisson_disk_sample: kept {keep.size} of {pool.cloud.n} pool points")
    return SampledCloud(
        PointCloud(pool.cloud.points[keep]),
        pool.triangle_ids[keep],
        pool.barycentric[keep],
    )


def poisson_disk_sample(mesh: Mesh, m: int, seed: int) -> PointCloud:
    """
    Exactly m blue-noise surface samples by weighted sample elimination

    A pool of 4m area-uniform samples is thinned by repeatedly removing the sample with the
    largest crowding weight sum((1 - d / 2r_max)^8) over neighbours closer than 2r_max.
    """
    return poisson_disk_sample_with_provenance(mesh, m, seed).cloud


class MeshBVH:
    """Axis-aligned bounding-volume hierarchy over the triangles of a mesh"""

    def __init__(self, mesh: Mesh, leaf_size: int = 8):
        self.mesh = mesh
        self.corners = mesh.corners
        self.leaf_size = leaf_size
        tri_lo = self.corners.min(axis=1)
        tri_hi = self.corners.max(axis=1)
        centroids = self.corners.mean(axis=1)

        self.order = np.arange(len(self.corners), dtype=np.int64)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(s: int, e: int) -> int:
            ids = self.order[s:e]
            lo.append(tri_lo[ids].min(axis=0))
            hi.append(tri_hi[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(lo) - 1

        stack = [(new_node(0, len(self.order)), 0, len(self.order))]
        while stack:
            node, s, e = stack.pop()
            if e - s <= leaf_size:
                continue
            ids = self.order[s:e]
            c = centroids[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            local = np.argsort(c[:, axis], kind="stable")
            self.order[s:e] = ids[local]
            mid = s + (e - s) // 2
            left[node] = new_node(s, mid)
            right[node] = new_node(mid, e)
            count[node] = 0
            stack.append((left[node], s, mid))
            stack.append((right[node], mid, e))

        self.lo = np.asarray(lo)
        self.hi = np.asarray(hi)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)

        # 上界の初期値用: 重心の kd-tree
        self._centroid_tree = cKDTree(centroids)

    def _box_sq(self, node: int, p: np.ndarray) -> float:
        gap = np.maximum(0.0, np.maximum(self.lo[node] - p, p - self.hi[node]))
        return float(gap @ gap)

    def _triangles_sq(self, tri_ids: np.ndarray, p: np.ndarray) -> np.ndarray:
        queries = np.broadcast_to(p, (len(tri_ids), 3))
        closest = closest_point_on_triangles(self.corners[tri_ids], queries)
        diff = closest - queries
        return np.einsum("ij,ij->i", diff, diff)

    def closest_squared_distance(self, points: np.ndarray) -> np.ndarray:
        """Squared distance from each point to the nearest triangle"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, seed_tri = self._centroid_tree.query(points)
        out = np.empty(points.shape[0])
        for i, p in enumerate(points):
            best = float(self._triangles_sq(np.array([seed_tri[i]]), p)[0])
            heap = [(self._box_sq(0, p), 0)]
            while heap:
                bound, node = heapq.heappop(heap)
                if bound >= best:
                    break
                if self.count[node] > 0:
                    ids = self.order[self.start[node]:self.start[node] + self.count[node]]
                    best = min(best, float(self._triangles_sq(ids, p).min()))
                    continue
                for child in (self.left[node], self.right[node]):
                    child_bound = self._box_sq(child, p)
                    if child_bound < best:
                        heapq.heappush(heap, (child_bound, child))
            out[i] = best
        return out


def point_to_mesh(cloud: PointCloud, mesh: Mesh, bvh: Optional[MeshBVH] = None) -> float:
    """
    Mean squared distance from the points to the mesh surface

    Args:
        cloud: Query points
        mesh: Ground-truth surface
        bvh: Optional prebuilt hierarchy over mesh

    Returns:
        mean_i min_f ||p_i - proj_f(p_i)||^2
    """
    if cloud is None or cloud.n == 0:
        raise InvalidArgumentError("point_to_mesh needs a non-empty cloud")
    bvh = bvh or MeshBVH(mesh)
    return float(bvh.closest_squared_distance(cloud.points).mean())


def point_to_mesh_exhaustive(cloud: PointCloud, mesh: Mesh) -> float:
    """Reference P2M scanning every triangle for every point"""
    corners = mesh.corners
    best = np.empty(cloud.n)
    for i, p in enumerate(cloud.points):
        queries = np.broadcast_to(p, (len(corners), 3))
        diff = closest_point_on_triangles(corners, queries) - queries
        best[i] = np.einsum("ij,ij->i", diff, diff).min()
    return float(best.mean())
