"""Gradient-field denoiser with UniNet uniformity refinement

Inference runs the interleaved update

    X' = X(t) + s_t * g(X(t))
    X(t+1) = X' + UniNet(X')      for t >= T_act
    X(t+1) = X'                   otherwise

over normalized patches, then stitches the patches back together.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np

from pcdenoise.config import settings
from pcdenoise.core.autodiff import (
    DenseEdgeConv,
    Linear,
    ParamStore,
    SharedMLP,
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    linear,
    matmul,
    no_grad,
    reduce_max,
    relu,
)
from pcdenoise.core.errors import InvalidArgumentError, NumericFailureError
from pcdenoise.core.metrics import chamfer, uniformity
from pcdenoise.core.geometry import (
    Patch,
    PointCloud,
    SpatialIndex,
    extract_patches,
    knn,
    merge_patches,
)
from pcdenoise.models.schemas import DenoiseSchedule, ModelConfig, UniformityConfig

logger = logging.getLogger(__name__)

FEATURE_PREFIX = "feature."
GRADIENT_PREFIX = "gradient."
UNINET_PREFIX = "uninet."
BACKBONE_PREFIXES = (FEATURE_PREFIX, GRADIENT_PREFIX)

# dense blocks per UniNet edge-conv layer
UNINET_BLOCKS = 2


class FeatureExtractor:
    """Stack of dense edge convolutions over one kNN graph of the noisy patch"""

    def __init__(self, store: ParamStore, cfg: ModelConfig, rng: np.random.Generator):
        self.k = cfg.k_feat
        self.layers: List[DenseEdgeConv] = []
        channels = 3
        for i, width in enumerate(cfg.feat_widths):
            layer = DenseEdgeConv(store, f"feature.conv{i}", channels, [width] * cfg.feat_blocks, rng)
            self.layers.append(layer)
            channels = layer.out_channels
        self.out_channels = sum(layer.out_channels for layer in self.layers)

    def __call__(self, noisy: PointCloud, index: Optional[SpatialIndex] = None) -> Tensor:
        if noisy.n < self.k + 1:
            raise InvalidArgumentError(
                f"feature extraction needs at least {self.k + 1} points, got {noisy.n}",
                k_feat=self.k,
                n=noisy.n,
            )
        graph = knn(noisy, None, self.k, index)
        x = constant(noisy.points)
        outputs = []
        for layer in self.layers:
            x = layer(x, graph)
            outputs.append(x)
        return concat(outputs)


class GradientHead:
    """
    Per-neighbour MLP over concat(x_i - x_j, h_j), max-pooled, then a linear map to 3D

    The first layer's weight is kept as two blocks (positions, features) so the feature
    projection h_j W_h can be computed once per patch and reused by every iteration.
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig, feature_channels: int, rng: np.random.Generator):
        self.k = cfg.k_grad
        first = cfg.grad_widths[0]
        fan_in = 3 + feature_channels
        bound = np.sqrt(1.0 / fan_in)
        self.pos_weight = store.add("gradient.mlp0.pos_weight", rng.uniform(-bound, bound, (3, first)))
        self.feat_weight = store.add(
            "gradient.mlp0.feat_weight", rng.uniform(-bound, bound, (feature_channels, first))
        )
        self.bias = store.add("gradient.mlp0.bias", rng.uniform(-bound, bound, (first,)))
        self.hidden = None
        if len(cfg.grad_widths) > 1:
            self.hidden = SharedMLP(store, "gradient.mlp", list(cfg.grad_widths), rng)
        self.out = Linear(store, "gradient.out", cfg.grad_widths[-1], 3, rng)

    def project(self, features: Tensor) -> Tensor:
        """h_j W_h + b for every noisy point"""
        return linear(features, self.feat_weight, self.bias)

    def __call__(self, positions: np.ndarray, noisy: PointCloud, projected: Tensor,
                 index: Optional[SpatialIndex] = None) -> Tensor:
        k = min(self.k, noisy.n)
        # positions is a separate cloud, so x_i's own noisy twin stays in its neighbourhood
        graph = knn(noisy, PointCloud(positions), k, index) if k < noisy.n else None
        if graph is None:
            neighbors = np.tile(np.arange(noisy.n), (positions.shape[0], 1))
        else:
            neighbors = graph.indices
        offsets = positions[:, None, :] - noisy.points[neighbors]
        x = relu(add(matmul(constant(offsets), self.pos_weight), gather_rows(projected, neighbors)))
        if self.hidden is not None:
            x = self.hidden(x)
        return self.out(reduce_max(x, axis=1))


class UniNet:
    """Entry MLP -> L dense edge convolutions on a kNN graph of X' -> exit MLP -> displacement"""

    def __init__(self, store: ParamStore, cfg: ModelConfig, rng: np.random.Generator):
        self.k = cfg.k_uninet
        self.entry = SharedMLP(store, "uninet.entry", [3, cfg.uninet_width], rng)
        self.convs: List[DenseEdgeConv] = []
        channels = cfg.uninet_width
        for i in range(cfg.l_uninet):
            conv = DenseEdgeConv(store, f"uninet.conv{i}", channels, [cfg.uninet_growth] * UNINET_BLOCKS, rng)
            self.convs.append(conv)
            channels = conv.out_channels
        self.exit = SharedMLP(store, "uninet.exit", [channels, cfg.uninet_width, 3], rng, final_activation=False)

    def __call__(self, positions: np.ndarray) -> Tensor:
        cloud = PointCloud(positions)
        if cloud.n < self.k + 1:
            raise InvalidArgumentError(
                f"UniNet needs at least {self.k + 1} points, got {cloud.n}", k_uninet=self.k, n=cloud.n
            )
        graph = knn(cloud, None, self.k)
        x = self.entry(constant(positions))
        for conv in self.convs:
            x = conv(x, graph)
        return self.exit(x)


class DenoiserModel:
    """Feature extractor, gradient head and UniNet sharing one ParamStore"""

    def __init__(self, cfg: Optional[ModelConfig] = None, seed: Optional[int] = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.init_seed if seed is None else seed)
        self.store = ParamStore()
        self.features = FeatureExtractor(self.store, self.cfg, rng)
        self.gradient = GradientHead(self.store, self.cfg, self.features.out_channels, rng)
        self.uninet = UniNet(self.store, self.cfg, rng)

    def backbone_parameter_count(self) -> int:
        return sum(self.store.parameter_count(p) for p in BACKBONE_PREFIXES)

    def uninet_parameter_count(self) -> int:
        return self.store.parameter_count(UNINET_PREFIX)

    def parameter_count(self) -> int:
        return self.store.parameter_count()

    def zero_heads(self) -> None:
        """Zero the output layers of the gradient head and UniNet (identity denoiser)"""
        for name in ("gradient.out.weight", "gradient.out.bias"):
            self.store[name].values[...] = 0
        last = self.uninet.exit.layers[-1]
        last.weight.values[...] = 0
        last.bias.values[...] = 0


def extract_features(patch: Patch, model: DenoiserModel, index: Optional[SpatialIndex] = None) -> Tensor:
    """Per-point features of the original noisy patch"""
    return model.features(patch.cloud, index)


def estimate_gradient(positions: np.ndarray, noisy: PointCloud, features: Tensor, model: DenoiserModel,
                      index: Optional[SpatialIndex] = None) -> Tensor:
    """
    Gradient field at the current positions

    Args:
        positions: (m, 3) current iterate X(t)
        noisy: Original noisy patch X; neighbours are always gathered here
        features: H computed from noisy
        model: Denoiser parameters
        index: Optional SpatialIndex over noisy

    Returns:
        (m, 3) Tensor
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise InvalidArgumentError("positions must be an (m, 3) array")
    if features.shape[0] != noisy.n:
        raise InvalidArgumentError("features and noisy cloud differ in length",
                                   features=features.shape[0], n=noisy.n)
    return model.gradient(positions, noisy, model.gradient.project(features), index)


def uninet_refine(positions: np.ndarray, model: DenoiserModel) -> Tensor:
    """UniNet displacement of the one-step points X'"""
    positions = np.asarray(positions, dtype=np.float64)
    if not np.all(np.isfinite(positions)):
        raise InvalidArgumentError("UniNet input contains NaN or Inf")
    return model.uninet(positions)


@dataclass
class DenoiseTrace:
    """Per-iteration diagnostics collected by denoise_patch"""

    uninet_displacement: List[float] = field(default_factory=list)
    iterates: List[np.ndarray] = field(default_factory=list)


def denoise_patch(
    patch: Patch,
    model: DenoiserModel,
    schedule: DenoiseSchedule,
    trace: Optional[DenoiseTrace] = None,
    keep_iterates: bool = False,
) -> PointCloud:
    """
    Interleaved gradient-ascent iteration on one normalized patch

    Args:
        patch: Normalized noisy patch
        model: Denoiser parameters
        schedule: T, step sizes and activation step
        trace: Optional collector of mean UniNet displacement per active step
        keep_iterates: Also store every X(t) in trace

    Returns:
        X(T) in the patch frame, same length and provenance as patch.cloud

    Raises:
        NumericFailureError: If an iterate becomes non-finite
    """
    noisy = patch.cloud
    with no_grad():
        index = SpatialIndex(noisy)
        projected = model.gradient.project(extract_features(patch, model, index))
        x = noisy.points.copy()
        for t, step in enumerate(schedule.step_sizes()):
            g = model.gradient(x, noisy, projected, index).values
            x_prime = x + step * g
            if not np.all(np.isfinite(x_prime)):
                raise NumericFailureError("non-finite iterate during denoising", iteration=t)
            if t >= schedule.t_act:
                d = uninet_refine(x_prime, model).values
                if schedule.scale_uninet:
                    d = step * d
                x = x_prime + d
                if trace is not None:
                    trace.uninet_displacement.append(float(np.linalg.norm(d, axis=1).mean()))
            else:
                x = x_prime
            if not np.all(np.isfinite(x)):
                raise NumericFailureError("non-finite iterate during denoising", iteration=t)
            if trace is not None and keep_iterates:
                trace.iterates.append(x.copy())
    return noisy.with_points(x)


def run_backbone_only(patch: Patch, model: DenoiserModel, schedule: DenoiseSchedule) -> PointCloud:
    """Reference gradient-ascent loop without UniNet"""
    noisy = patch.cloud
    with no_grad():
        index = SpatialIndex(noisy)
        features = model.features(noisy, index)
        projected = model.gradient.project(features)
        x = noisy.points.copy()
        for t in range(schedule.T):
            x = x + schedule.step_size(t) * model.gradient(x, noisy, projected, index).values
            if not np.all(np.isfinite(x)):
                raise NumericFailureError("non-finite iterate during denoising", iteration=t)
    return noisy.with_points(x)


def denoise_cloud(
    cloud: PointCloud,
    model: DenoiserModel,
    schedule: DenoiseSchedule,
    patch_size: Optional[int] = None,
    workers: Optional[int] = None,
    trace: Optional[DenoiseTrace] = None,
) -> PointCloud:
    """
    Denoise a whole cloud patch by patch

    Patches are denoised on a thread pool and merged in patch order, so the result does not
    depend on the worker count.

    Returns:
        Cloud with the same point count and index correspondence as the input
    """
    patch_size = patch_size or schedule.patch_size
    workers = workers or settings.workers
    patches = extract_patches(cloud, patch_size, schedule.coverage_factor)
    logger.info(f"Denoising {cloud.n} points in {len(patches)} patches with {workers} worker(s)")

    def run(patch: Patch) -> Tuple[Patch, Optional[DenoiseTrace]]:
        local = DenoiseTrace() if trace is not None else None
        out = denoise_patch(patch, model, schedule, local)
        return patch.with_points(out.points), local

    if workers <= 1:
        results = [run(p) for p in patches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, patches))

    if trace is not None:
        for _, local in results:
            trace.uninet_displacement.extend(local.uninet_displacement)
    merged = merge_patches(cloud.n, [p for p, _ in results])
    return PointCloud(merged.points, cloud.source_index)


def benchmark_overhead(cloud: PointCloud, model: DenoiserModel, schedule: DenoiseSchedule,
                       workers: int = 1) -> Dict[str, float]:
    """Parameter and wall-clock cost of UniNet on one cloud"""
    backbone_schedule = schedule.model_copy(update={"t_act": schedule.T})

    start = time.perf_counter()
    denoise_cloud(cloud, model, backbone_schedule, workers=workers)
    backbone_seconds = time.perf_counter() - start

    start = time.perf_counter()
    denoise_cloud(cloud, model, schedule, workers=workers)
    full_seconds = time.perf_counter() - start

    backbone_params = model.backbone_parameter_count()
    uninet_params = model.uninet_parameter_count()
    return {
        "backbone_params": float(backbone_params),
        "uninet_params": float(uninet_params),
        "param_overhead": uninet_params / backbone_params,
        "backbone_seconds": backbone_seconds,
        "full_seconds": full_seconds,
        "time_overhead": full_seconds / backbone_seconds - 1.0 if backbone_seconds > 0 else 0.0,
    }


def sweep_activation_step(
    noisy: PointCloud,
    clean: PointCloud,
    model: DenoiserModel,
    schedule: DenoiseSchedule,
    t_acts: Sequence[int],
    uniformity_cfg: Optional[UniformityConfig] = None,
    workers: int = 1,
) -> List[Dict[str, float]]:
    """CD and uniformity of the denoised cloud for each activation step"""
    rows = []
    for t_act in t_acts:
        if not 0 <= t_act <= schedule.T:
            raise InvalidArgumentError(f"activation step {t_act} outside [0, {schedule.T}]", t_act=t_act)
        denoised = denoise_cloud(noisy, model, schedule.model_copy(update={"t_act": t_act}), workers=workers)
        rows.append({
            "t_act": float(t_act),
            "cd": chamfer(denoised, clean),
            "uniformity": uniformity(denoised, clean, uniformity_cfg),
        })
        logger.info(f"t_act={t_act}: cd={rows[-1]['cd']:.6e} uni={rows[-1]['uniformity']:.6e}")
    return rows
