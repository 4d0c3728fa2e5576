"""Parametric additive corruptions of clean point clouds"""

from typing import Tuple, Union
import logging

import numpy as np

from pcdenoise.core.errors import InvalidArgumentError
from pcdenoise.core.geometry import PointCloud
from pcdenoise.models.schemas import NoiseKind, NoiseSpec, NOISE_KIND_ALIASES

logger = logging.getLogger(__name__)

# 離散ノイズの台: 原点 + 6 軸方向オフセット
DISCRETE_SUPPORT = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ]
)
DISCRETE_PROBABILITIES = np.array([0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1])

_ANISOTROPIC_SHAPE = np.array(
    [
        [1.0, -0.5, -0.25],
        [-0.5, 1.0, -0.25],
        [-0.25, -0.25, 1.0],
    ]
)


def resolve_kind(kind: Union[str, NoiseKind]) -> NoiseKind:
    """Map a kind name or alias to NoiseKind"""
    if isinstance(kind, NoiseKind):
        return kind
    name = NOISE_KIND_ALIASES.get(str(kind).strip().lower(), str(kind).strip().lower())
    try:
        return NoiseKind(name)
    except ValueError:
        valid = [k.value for k in NoiseKind] + sorted(NOISE_KIND_ALIASES)
        raise InvalidArgumentError(
            f"unknown noise kind '{kind}' (valid: {', '.join(valid)})", kind=str(kind)
        )


def anisotropic_covariance(scale: float) -> np.ndarray:
    """Covariance s^2 * [[1,-1/2,-1/4],[-1/2,1,-1/4],[-1/4,-1/4,1]]"""
    return scale**2 * _ANISOTROPIC_SHAPE


def unidirectional_axis(spec: NoiseSpec) -> Tuple[int, ...]:
    """Coordinate axes perturbed by a NoiseSpec; the uni-directional kind touches x only"""
    if resolve_kind(spec.kind) is NoiseKind.UNIDIRECTIONAL_GAUSSIAN:
        return (0,)
    return (0, 1, 2)


def draw_offsets(kind: Union[str, NoiseKind], scale: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw n i.i.d. 3D offsets from a noise density

    Args:
        kind: Noise kind or alias
        scale: Scale s (>= 0); 0 yields zero offsets
        n: Number of offsets
        rng: Generator owned by the caller

    Returns:
        (n, 3) float64 offsets
    """
    kind = resolve_kind(kind)
    if scale < 0 or not np.isfinite(scale):
        raise InvalidArgumentError("noise scale must be finite and non-negative", scale=scale)

    if kind is NoiseKind.ISOTROPIC_GAUSSIAN:
        return rng.normal(0.0, scale, size=(n, 3))
    if kind is NoiseKind.LAPLACE:
        return rng.laplace(0.0, scale, size=(n, 3))
    if kind is NoiseKind.DISCRETE:
        choice = rng.choice(len(DISCRETE_SUPPORT), size=n, p=DISCRETE_PROBABILITIES)
        return scale * DISCRETE_SUPPORT[choice]
    if kind is NoiseKind.ANISOTROPIC_GAUSSIAN:
        factor = np.linalg.cholesky(_ANISOTROPIC_SHAPE)
        return scale * rng.standard_normal((n, 3)) @ factor.T
    if kind is NoiseKind.UNIDIRECTIONAL_GAUSSIAN:
        offsets = np.zeros((n, 3))
        offsets[:, 0] = rng.normal(0.0, scale, size=n)
        return offsets
    # uniform_ball: 正規分布の方向 x 立方根一様の半径
    direction = rng.standard_normal((n, 3))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    radius = scale * np.cbrt(rng.random((n, 1)))
    return direction / norms * radius


def apply_noise(clean: PointCloud, spec: NoiseSpec) -> PointCloud:
    """
    Corrupt a unit-sphere-normalized cloud with i.i.d. additive noise

    Axes the kind does not perturb are copied bit for bit.

    Args:
        clean: Clean cloud
        spec: Kind, scale and seed

    Returns:
        Noisy cloud with the same point count and provenance
    """
    rng = np.random.default_rng(spec.seed)
    offsets = draw_offsets(spec.kind, spec.scale, clean.n, rng)
    noisy = clean.points.copy()
    for axis in unidirectional_axis(spec):
        noisy[:, axis] += offsets[:, axis]
    logger.debug(f"apply_noise: {resolve_kind(spec.kind).value} s={spec.scale} seed={spec.seed} n={clean.n}")
    return clean.with_points(noisy)


def stream_seed(base_seed: int, cloud_id: int) -> int:
    """Independent per-cloud seed for parallel corruption"""
    return int(base_seed) ^ int(cloud_id)


def training_noise_std(rng: np.random.Generator, low: float = 0.005, high: float = 0.02) -> float:
    """Per-patch training noise std ~ U[low, high]"""
    if low > high:
        raise InvalidArgumentError("noise std range is empty", low=low, high=high)
    return float(rng.uniform(low, high))
