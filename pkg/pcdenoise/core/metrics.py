"""Evaluation and loss metrics: Chamfer, exact EMD and the ground-truth-aware uniformity"""

from typing import List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from pcdenoise.core.errors import InvalidArgumentError
from pcdenoise.core.geometry import PointCloud, SpatialIndex, farthest_point_sample
from pcdenoise.core.mesh_sampling import Mesh, MeshBVH, point_to_mesh
from pcdenoise.models.schemas import MetricReport, UniformityConfig, REPORT_COLUMNS

logger = logging.getLogger(__name__)

# 代入問題のコスト行列 (n x n float64) が大きくなりすぎない範囲
EMD_MAX_POINTS = 5000


def _require_points(*clouds: Optional[PointCloud]) -> None:
    for cloud in clouds:
        if cloud is None or cloud.n == 0:
            raise InvalidArgumentError("metric inputs must be non-empty clouds")


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean of squared nearest-neighbour distances"""
    _require_points(a, b)
    a_to_b = SpatialIndex(b).nearest_distances(a.points)
    b_to_a = SpatialIndex(a).nearest_distances(b.points)
    return float(np.mean(a_to_b**2) + np.mean(b_to_a**2))


def emd(a: PointCloud, b: PointCloud) -> Tuple[float, np.ndarray]:
    """
    Earth mover's distance between equal-size clouds

    Solved exactly as a linear assignment on the squared-distance cost matrix.

    Returns:
        (mean squared matched distance, assignment) where a[i] is matched to b[assignment[i]]

    Raises:
        InvalidArgumentError: If the clouds differ in size
    """
    _require_points(a, b)
    if a.n != b.n:
        raise InvalidArgumentError("EMD needs clouds of equal size", n_a=a.n, n_b=b.n)
    cost = cdist(a.points, b.points, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(a.n, dtype=np.int64)
    assignment[rows] = cols
    return float(cost[rows, cols].mean()), assignment


def emd_gradient(a: PointCloud, b: PointCloud, assignment: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Subgradient of EMD with respect to a, holding the optimal matching fixed

    Returns:
        (n, 3) array 2 (a_i - b_phi(i)) / n
    """
    if assignment is None:
        _, assignment = emd(a, b)
    elif a.n != b.n:
        raise InvalidArgumentError("EMD needs clouds of equal size", n_a=a.n, n_b=b.n)
    return 2.0 * (a.points - b.points[assignment]) / a.n


def _in_ball_nn(points: np.ndarray, fallback: float) -> np.ndarray:
    """Nearest other-point distance inside a ball population"""
    if points.shape[0] < 2:
        return np.full(points.shape[0], fallback)
    dist, _ = cKDTree(points).query(points, k=2)
    return dist[:, 1]


def _uniformity_at_radius(
    denoised: PointCloud,
    ground_truth: PointCloud,
    seeds: np.ndarray,
    radius: float,
    denoised_index: SpatialIndex,
    truth_index: SpatialIndex,
) -> Optional[float]:
    terms = []
    for seed in seeds:
        center = denoised.points[seed]
        members = denoised_index.ball(center, radius)
        expected_members = truth_index.ball(center, radius)
        n_hat = expected_members.size
        if n_hat < 2:
            continue
        d_hat = float(_in_ball_nn(ground_truth.points[expected_members], 2.0 * radius).mean())
        if d_hat <= 0.0:
            continue

        imbalance = (members.size - n_hat) ** 2 / n_hat
        d = _in_ball_nn(denoised.points[members], 2.0 * radius)
        clutter = float(np.mean((d - d_hat) ** 2 / d_hat))
        terms.append(imbalance * clutter)

    if not terms:
        return None
    return float(np.mean(terms))


def uniformity(denoised: PointCloud, ground_truth: PointCloud, cfg: Optional[UniformityConfig] = None) -> float:
    """
    Uniformity of a denoised cloud judged against its ground truth

    For every area fraction p, ceil(r N) seeds are drawn by farthest point sampling on the
    denoised cloud. Each seed contributes the product of a population imbalance term and an
    in-ball nearest-neighbour clutter term, with expectations taken from the ground-truth
    ball at the same seed. Seeds whose ground-truth ball holds fewer than two points are
    skipped and the mean renormalized over the remaining seeds. The per-p means are summed.

    Args:
        denoised: Cloud being judged (unit-sphere normalized)
        ground_truth: Clean reference cloud
        cfg: Seed ratio and area fractions

    Returns:
        Non-negative uniformity score (0 when denoised equals ground_truth)
    """
    _require_points(denoised, ground_truth)
    cfg = cfg or UniformityConfig()
    n_seeds = min(denoised.n, math.ceil(cfg.seed_ratio * denoised.n))
    seeds = farthest_point_sample(denoised, n_seeds, start=0)
    denoised_index = SpatialIndex(denoised)
    truth_index = SpatialIndex(ground_truth)

    total = 0.0
    for p, radius in zip(cfg.area_fractions, cfg.radii):
        value = _uniformity_at_radius(denoised, ground_truth, seeds, radius, denoised_index, truth_index)
        if value is None:
            logger.warning(f"uniformity: no valid seed at p={p}; term counted as 0")
            continue
        total += value
    return total


def evaluate_clouds(
    denoised: PointCloud,
    clean: PointCloud,
    mesh: Optional[Mesh] = None,
    cfg: Optional[UniformityConfig] = None,
    bvh: Optional[MeshBVH] = None,
    emd_max_points: int = EMD_MAX_POINTS,
) -> MetricReport:
    """
    Full metric suite of one denoised cloud

    EMD is left out (None, with a warning) when the point counts differ or exceed
    emd_max_points; P2M is None without a mesh.
    """
    cd = chamfer(denoised, clean)
    uni = uniformity(denoised, clean, cfg)
    p2m = point_to_mesh(denoised, mesh, bvh) if mesh is not None else None

    emd_value = None
    if denoised.n != clean.n:
        logger.warning(f"EMD omitted: point counts differ ({denoised.n} vs {clean.n})")
    elif denoised.n > emd_max_points:
        logger.warning(f"EMD omitted: {denoised.n} points exceed the assignment limit {emd_max_points}")
    else:
        emd_value, _ = emd(denoised, clean)

    return MetricReport(cd=cd, uniformity=uni, p2m=p2m, emd=emd_value)


def format_report_tsv(rows: Sequence[Sequence[str]], header: bool = True) -> str:
    """Tab-separated report text, one row per (shape, noise level)"""
    lines: List[str] = []
    if header:
        lines.append("\t".join(REPORT_COLUMNS))
    for row in rows:
        lines.append("\t".join(str(v) for v in row))
    return "\n".join(lines) + "\n"
