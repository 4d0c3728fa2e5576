"""Geometric kernels: neighbour search, sampling, normalization and patch decomposition

Every function here is pure. A SpatialIndex may be shared between threads once built.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, List
import logging
import math

import numpy as np
from scipy.spatial import cKDTree

from pcdenoise.core.errors import InvalidArgumentError, InvalidStateError

logger = logging.getLogger(__name__)

# relative slack used when deciding whether a kd-tree candidate list may hide a tie
_BOUNDARY_RTOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D positions with optional provenance indices into a parent cloud"""

    points: np.ndarray
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidArgumentError(
                "points must be an (n, 3) array", shape=list(points.shape)
            )
        if points.shape[0] < 1:
            raise InvalidArgumentError("point cloud is empty")
        if not np.all(np.isfinite(points)):
            raise InvalidArgumentError("point cloud contains NaN or Inf")
        object.__setattr__(self, "points", points)

        if self.source_index is not None:
            source = np.asarray(self.source_index, dtype=np.int64)
            if source.shape != (points.shape[0],):
                raise InvalidArgumentError(
                    "source_index must have one entry per point",
                    n=points.shape[0],
                    source_len=int(source.size),
                )
            if np.any(source < 0):
                raise InvalidArgumentError("source_index entries must be non-negative")
            object.__setattr__(self, "source_index", source)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same provenance, new positions"""
        return PointCloud(points, self.source_index)


@dataclass(frozen=True)
class NeighborGraph:
    """k nearest neighbours per query row, ascending by distance, ties by smaller index"""

    k: int
    indices: np.ndarray
    distances: np.ndarray

    @property
    def n(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class Patch:
    """A normalized kNN neighbourhood of a seed point"""

    cloud: PointCloud
    seed_index: int
    center: np.ndarray
    scale: float
    # distance from the seed to every member, in parent coordinates
    seed_distances: np.ndarray = field(default=None, repr=False)

    def with_points(self, points: np.ndarray) -> "Patch":
        """Replace the (normalized-frame) positions, keep the transform and provenance"""
        return replace(self, cloud=self.cloud.with_points(points))

    def denormalized(self) -> np.ndarray:
        return self.cloud.points * self.scale + self.center


class SpatialIndex:
    """Exact Euclidean neighbour queries backed by a kd-tree"""

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud
        self.tree = cKDTree(cloud.points)

    def query(self, query_points: np.ndarray, k: int, exclude_self: bool = False) -> NeighborGraph:
        """
        k nearest neighbours for each query row

        The kd-tree proposes candidates; distances are recomputed exactly and re-ranked with
        the index tie rule. Rows whose k-th candidate sits on the retrieval boundary are
        rescanned against the whole cloud so the result always equals a brute-force scan.

        Args:
            query_points: (m, 3) query positions
            k: Neighbour count
            exclude_self: Row i never reports index i (query aliases the indexed cloud)

        Returns:
            NeighborGraph with (m, k) indices and distances
        """
        points = self.cloud.points
        n = points.shape[0]
        query_points = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
        m = query_points.shape[0]
        available = n - 1 if exclude_self else n
        if k < 1 or k > available:
            raise InvalidArgumentError(
                f"k={k} is out of range for a cloud of {n} points", k=k, n=n
            )

        wanted = k + (1 if exclude_self else 0)
        k_query = min(n, wanted + 4)
        kd_dist, idx = self.tree.query(query_points, k=k_query)
        kd_dist = np.asarray(kd_dist).reshape(m, k_query)
        idx = np.asarray(idx, dtype=np.int64).reshape(m, k_query)

        exact = np.linalg.norm(points[idx] - query_points[:, None, :], axis=2)
        if exclude_self:
            exact = np.where(idx == np.arange(m)[:, None], np.inf, exact)
        order = np.lexsort((idx, exact), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)[:, :k]
        exact = np.take_along_axis(exact, order, axis=1)[:, :k]

        if k_query < n:
            boundary = kd_dist[:, -1]
            unsafe = np.flatnonzero(exact[:, -1] >= boundary * (1.0 - _BOUNDARY_RTOL))
            for row in unsafe:
                idx[row], exact[row] = self._scan_row(query_points[row], k, row if exclude_self else None)
            if unsafe.size:
                logger.debug(f"knn: {unsafe.size} rows rescanned at the candidate boundary")

        return NeighborGraph(k=k, indices=idx, distances=exact)

    def _scan_row(self, q: np.ndarray, k: int, self_row: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
        all_idx = np.arange(self.cloud.n, dtype=np.int64)
        dist = np.linalg.norm(self.cloud.points - q[None, :], axis=1)
        if self_row is not None:
            dist[self_row] = np.inf
        order = np.lexsort((all_idx, dist))[:k]
        return all_idx[order], dist[order]

    def nearest_distances(self, query_points: np.ndarray) -> np.ndarray:
        """Distance from each query point to its nearest indexed point (self included)"""
        return self.query(query_points, 1).distances[:, 0]

    def ball(self, seed: np.ndarray, radius: float) -> np.ndarray:
        """Indices within radius of seed, ascending"""
        slack = radius * (1.0 + _BOUNDARY_RTOL) + 1e-12
        candidates = np.asarray(self.tree.query_ball_point(seed, slack), dtype=np.int64)
        if candidates.size == 0:
            return candidates
        dist = np.linalg.norm(self.cloud.points[candidates] - seed[None, :], axis=1)
        return np.sort(candidates[dist <= radius])


def knn(cloud: PointCloud, query: Optional[PointCloud], k: int, index: Optional[SpatialIndex] = None) -> NeighborGraph:
    """
    Exact k nearest neighbours

    Args:
        cloud: Indexed cloud
        query: Query cloud; None or the same object as cloud means a self-query with self excluded
        k: Neighbour count, k < cloud.n
        index: Optional prebuilt SpatialIndex over cloud

    Returns:
        NeighborGraph, one row per query point

    Raises:
        InvalidArgumentError: If k >= cloud.n or k < 1
    """
    if k >= cloud.n:
        raise InvalidArgumentError(f"k={k} must be smaller than the cloud size {cloud.n}", k=k, n=cloud.n)
    index = index or SpatialIndex(cloud)
    if query is None or query is cloud:
        return index.query(cloud.points, k, exclude_self=True)
    return index.query(query.points, k, exclude_self=False)


def ball_query(cloud: PointCloud, seed: np.ndarray, radius: float, index: Optional[SpatialIndex] = None) -> np.ndarray:
    """
    Indices of points with Euclidean distance <= radius from seed, ascending

    Raises:
        InvalidArgumentError: On a non-finite seed or radius, or a negative radius
    """
    seed = np.asarray(seed, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(seed)) or not math.isfinite(radius):
        raise InvalidArgumentError("ball query seed and radius must be finite")
    if radius < 0:
        raise InvalidArgumentError("ball query radius must be non-negative", radius=radius)
    index = index or SpatialIndex(cloud)
    return index.ball(seed, radius)


def farthest_point_sample(cloud: PointCloud, m: int, start: int = 0) -> np.ndarray:
    """
    Greedy max-min selection starting at `start`; ties go to the smallest index

    Raises:
        InvalidArgumentError: If m is not in [1, n] or start is not a valid index
    """
    n = cloud.n
    if m < 1 or m > n:
        raise InvalidArgumentError(f"cannot select {m} seeds from {n} points", m=m, n=n)
    if not 0 <= start < n:
        raise InvalidArgumentError(f"start index {start} out of range", start=start, n=n)

    points = cloud.points
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_sq = np.sum((points - points[start]) ** 2, axis=1)
    for j in range(1, m):
        # argmax returns the first maximizer
        nxt = int(np.argmax(min_sq))
        selected[j] = nxt
        min_sq = np.minimum(min_sq, np.sum((points - points[nxt]) ** 2, axis=1))
    return selected


def normalize_unit_sphere(cloud: PointCloud) -> Tuple[PointCloud, np.ndarray, float]:
    """
    Center at the centroid and scale the farthest point to norm 1

    Returns:
        (normalized cloud, center, scale) so that original = normalized * scale + center
    """
    center = cloud.points.mean(axis=0)
    centered = cloud.points - center
    scale = float(np.max(np.linalg.norm(centered, axis=1)))
    if scale == 0.0:
        scale = 1.0
    return cloud.with_points(centered / scale), center, scale


def denormalize(cloud: PointCloud, center: np.ndarray, scale: float) -> PointCloud:
    """Inverse of normalize_unit_sphere"""
    return cloud.with_points(cloud.points * scale + np.asarray(center, dtype=np.float64))


def _make_patch(cloud: PointCloud, seed: int, members: np.ndarray, seed_distances: np.ndarray) -> Patch:
    sub = PointCloud(cloud.points[members], source_index=members)
    normalized, center, scale = normalize_unit_sphere(sub)
    return Patch(
        cloud=normalized,
        seed_index=int(seed),
        center=center,
        scale=scale,
        seed_distances=seed_distances,
    )


def patch_at(cloud: PointCloud, seed: int, patch_size: int, index: Optional[SpatialIndex] = None) -> Patch:
    """The normalized patch_size-NN neighbourhood of one seed (seed included)"""
    if patch_size > cloud.n:
        raise InvalidArgumentError(
            f"patch size {patch_size} exceeds cloud size {cloud.n}",
            patch_size=patch_size,
            n=cloud.n,
        )
    index = index or SpatialIndex(cloud)
    graph = index.query(cloud.points[seed:seed + 1], patch_size)
    return _make_patch(cloud, seed, graph.indices[0], graph.distances[0])


def random_patch(cloud: PointCloud, patch_size: int, rng: np.random.Generator,
                 index: Optional[SpatialIndex] = None) -> Patch:
    """Training patch around a uniformly drawn seed"""
    seed = int(rng.integers(cloud.n))
    return patch_at(cloud, seed, patch_size, index)


def extract_patches(cloud: PointCloud, patch_size: int, coverage_factor: float = 3.0,
                    start: int = 0) -> List[Patch]:
    """
    Split a cloud into overlapping normalized patches seeded by farthest point sampling

    Seeds number ceil(coverage_factor * n / patch_size), or 1 when patch_size equals n.
    If a point is left uncovered, further FPS seeds are appended until every index belongs to at least one patch.

    Raises:
        InvalidArgumentError: If patch_size > n
    """
    n = cloud.n
    if patch_size > n:
        raise InvalidArgumentError(
            f"patch size {patch_size} exceeds cloud size {n}", patch_size=patch_size, n=n
        )
    if coverage_factor <= 0:
        raise InvalidArgumentError("coverage factor must be positive", coverage_factor=coverage_factor)

    n_seeds = 1 if patch_size == n else min(n, math.ceil(coverage_factor * n / patch_size))
    index = SpatialIndex(cloud)
    seeds = farthest_point_sample(cloud, n_seeds, start)
    graph = index.query(cloud.points[seeds], patch_size)

    covered = np.zeros(n, dtype=bool)
    covered[graph.indices.ravel()] = True
    patches = [
        _make_patch(cloud, seed, graph.indices[j], graph.distances[j])
        for j, seed in enumerate(seeds)
    ]

    if not covered.all():
        # 未カバー点のうちシードから最も遠い点を追加シードにする
        seed_sq = np.full(n, np.inf)
        for s in seeds:
            seed_sq = np.minimum(seed_sq, np.sum((cloud.points - cloud.points[s]) ** 2, axis=1))
        while not covered.all():
            uncovered = np.flatnonzero(~covered)
            seed = int(uncovered[np.argmax(seed_sq[uncovered])])
            patch = patch_at(cloud, seed, patch_size, index)
            covered[patch.cloud.source_index] = True
            patches.append(patch)
            seed_sq = np.minimum(seed_sq, np.sum((cloud.points - cloud.points[seed]) ** 2, axis=1))
        logger.info(f"extract_patches: added {len(patches) - n_seeds} seeds to complete coverage")

    logger.debug(f"extract_patches: {len(patches)} patches of {patch_size} from {n} points")
    return patches


def merge_patches(parent_n: int, patches: Sequence[Patch]) -> PointCloud:
    """
    Stitch denoised patches back into a cloud of parent_n points

    Point i takes its position from the patch whose seed was nearest to i in the parent cloud
    (ties go to the lower seed index), denormalized with that patch's transform.

    Raises:
        InvalidStateError: If some index in 0..parent_n-1 is not covered by any patch
    """
    if not patches:
        raise InvalidStateError("no patches to merge", parent_n=parent_n)

    members = np.concatenate([p.cloud.source_index for p in patches])
    dists = np.concatenate([p.seed_distances for p in patches])
    seed_ids = np.concatenate([np.full(p.cloud.n, p.seed_index, dtype=np.int64) for p in patches])
    positions = np.concatenate([p.denormalized() for p in patches])

    if members.size and (members.min() < 0 or members.max() >= parent_n):
        raise InvalidStateError("patch member index outside the parent cloud", parent_n=parent_n)

    order = np.lexsort((seed_ids, dists, members))
    members_sorted = members[order]
    unique_members, first = np.unique(members_sorted, return_index=True)
    if unique_members.size != parent_n:
        missing = np.setdiff1d(np.arange(parent_n), unique_members)
        raise InvalidStateError(
            f"{missing.size} points are not covered by any patch",
            first_missing=int(missing[0]),
        )

    merged = np.empty((parent_n, 3), dtype=np.float64)
    merged[unique_members] = positions[order][first]
    return PointCloud(merged)
