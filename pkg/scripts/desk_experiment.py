"""デスクスケールの end-to-end 実験スクリプト

Synthetic trimesh shapes are sampled into a small dataset, both training stages are run, and
two held-out shapes are denoised at 2% isotropic Gaussian noise with and without UniNet.

    python scripts/desk_experiment.py --work runs/desk --epochs 20
"""

from pathlib import Path
from typing import Dict, List, Optional, Tuple
import argparse
import logging
import os
import sys

# プロジェクトルートをパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import trimesh

from pcdenoise.config import settings
from pcdenoise.core.autodiff import precision
from pcdenoise.core.denoiser import DenoiseTrace, benchmark_overhead, denoise_cloud, denoise_patch
from pcdenoise.core.geometry import PointCloud, normalize_unit_sphere, patch_at
from pcdenoise.core.mesh_sampling import Mesh, poisson_disk_sample
from pcdenoise.core.metrics import chamfer, uniformity
from pcdenoise.core.noise import apply_noise
from pcdenoise.core.training import MANIFEST_NAME, Trainer, build_dataset
from pcdenoise.main import configure_logging
from pcdenoise.models.schemas import ExperimentConfig, NoiseSpec

logger = logging.getLogger("desk_experiment")

# 学習用4形状 + 検証用1形状 (manifest の末尾が検証に回る)
TRAIN_SHAPES = ["sphere", "box", "capsule", "cylinder", "cone"]
TEST_SHAPES = ["torus", "annulus"]

# 合否の閾値
BACKBONE_CD_RATIO = 0.5
UNIFORMITY_RATIO = 0.6
FULL_CD_RATIO = 1.05
PARAM_OVERHEAD = 0.15
TIME_OVERHEAD = 0.25

RESULTS_NAME = "desk_results.tsv"


def make_shape(name: str) -> Mesh:
    """Synthetic mesh by name"""
    builders = {
        "sphere": lambda: trimesh.creation.icosphere(subdivisions=3),
        "box": lambda: trimesh.creation.box(extents=(1.0, 0.6, 0.4)),
        "capsule": lambda: trimesh.creation.capsule(height=1.0, radius=0.3),
        "cylinder": lambda: trimesh.creation.cylinder(radius=0.4, height=1.0, sections=48),
        "cone": lambda: trimesh.creation.cone(radius=0.5, height=1.0, sections=48),
        "torus": lambda: trimesh.creation.torus(major_radius=0.6, minor_radius=0.2),
        "annulus": lambda: trimesh.creation.annulus(r_min=0.3, r_max=0.6, height=0.4, sections=48),
    }
    shape = builders[name]()
    return Mesh(np.asarray(shape.vertices), np.asarray(shape.faces))


def plane_cd_trace(trainer_config: ExperimentConfig, model, seed: int) -> List[float]:
    """CD to the clean plane after each of the first 10 iterations"""
    square = Mesh(
        np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]]),
        np.array([[0, 1, 2], [0, 2, 3]]),
    )
    clean, _, _ = normalize_unit_sphere(poisson_disk_sample(square, 2000, seed))
    noisy = apply_noise(clean, NoiseSpec(kind="isotropic_gaussian", scale=0.02, seed=seed))
    size = min(trainer_config.denoise.patch_size, noisy.n)
    patch = patch_at(noisy, 0, size)
    clean_patch = PointCloud((clean.points[patch.cloud.source_index] - patch.center) / patch.scale)

    schedule = trainer_config.denoise.model_copy(update={"T": 10, "t_act": 10})
    trace = DenoiseTrace()
    denoise_patch(patch, model, schedule, trace, keep_iterates=True)
    return [chamfer(PointCloud(x), clean_patch) for x in trace.iterates]


def evaluate_shape(name: str, config: ExperimentConfig, model, n: int, seed: int) -> Dict[str, float]:
    clean, _, _ = normalize_unit_sphere(poisson_disk_sample(make_shape(name), n, seed))
    noisy = apply_noise(clean, NoiseSpec(kind="isotropic_gaussian", scale=0.02, seed=seed))

    backbone = denoise_cloud(noisy, model, config.denoise.model_copy(update={"t_act": config.denoise.T}))
    full = denoise_cloud(noisy, model, config.denoise)
    overhead = benchmark_overhead(noisy, model, config.denoise)
    return {
        "cd_noisy": chamfer(noisy, clean),
        "cd_backbone": chamfer(backbone, clean),
        "cd_full": chamfer(full, clean),
        "uni_backbone": uniformity(backbone, clean, config.uniformity),
        "uni_full": uniformity(full, clean, config.uniformity),
        "param_overhead": overhead["param_overhead"],
        "time_overhead": overhead["time_overhead"],
    }


def check(
    results: Dict[str, Dict[str, float]],
    plane: List[float],
    uninet_emd: float,
    identity_emd: Optional[float],
) -> List[Tuple[str, bool]]:
    """(criterion, passed) for every acceptance check"""
    mean = {k: float(np.mean([r[k] for r in results.values()])) for k in next(iter(results.values()))}
    return [
        ("backbone CD <= 50% of noisy CD", mean["cd_backbone"] <= BACKBONE_CD_RATIO * mean["cd_noisy"]),
        ("full uniformity <= 60% of backbone uniformity", mean["uni_full"] <= UNIFORMITY_RATIO * mean["uni_backbone"]),
        ("full CD <= 1.05x backbone CD", mean["cd_full"] <= FULL_CD_RATIO * mean["cd_backbone"]),
        ("UniNet parameters <= 15% of backbone", mean["param_overhead"] <= PARAM_OVERHEAD),
        ("UniNet wall-clock <= +25%", mean["time_overhead"] <= TIME_OVERHEAD),
        ("plane CD decreases over 10 iterations", all(b < a for a, b in zip(plane, plane[1:]))),
        ("UniNet validation EMD below identity baseline", identity_emd is not None and uninet_emd < identity_emd),
    ]


def format_results(
    results: Dict[str, Dict[str, float]],
    plane: List[float],
    uninet_emd: float,
    identity_emd: Optional[float],
    criteria: List[Tuple[str, bool]],
) -> List[str]:
    """Tab-separated result lines: per-shape metrics, plane trace, validation EMDs, verdicts"""
    columns = list(next(iter(results.values())))
    lines = ["shape\t" + "\t".join(columns)]
    for name, row in results.items():
        lines.append(name + "\t" + "\t".join(f"{row[c]:.6e}" for c in columns))
    lines.append("plane_cd\t" + "\t".join(f"{v:.6e}" for v in plane))
    lines.append(f"val_emd\t{uninet_emd:.6e}")
    lines.append("val_emd_identity\t" + ("nan" if identity_emd is None else f"{identity_emd:.6e}"))
    lines.extend(f"{'PASS' if passed else 'FAIL'}\t{criterion}" for criterion, passed in criteria)
    return lines


def run(work: Path, config: ExperimentConfig, counts: List[int], seed: int) -> int:
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    meshes = [(name, make_shape(name)) for name in TRAIN_SHAPES]
    build_dataset(meshes, counts, data, seed)

    stage1 = Trainer(config, data / MANIFEST_NAME, work / "backbone.ckpt")
    stage1.pretrain_backbone()
    stage2 = Trainer(config, data / MANIFEST_NAME, work / "full.ckpt")
    stage2.load_backbone(stage1.best_path)
    model = stage2.train_uninet()
    logger.info(f"Evaluating held-out shapes: {', '.join(TEST_SHAPES)}")

    results = {name: evaluate_shape(name, config, model, counts[-1], seed + i) for i, name in enumerate(TEST_SHAPES)}
    plane = plane_cd_trace(config, model, seed)

    criteria = check(results, plane, stage2.best, stage2.identity_emd)
    lines = format_results(results, plane, stage2.best, stage2.identity_emd, criteria)
    (work / RESULTS_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    logger.info(f"Results written to {work / RESULTS_NAME}")
    return 0 if all(passed for _, passed in criteria) else 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="デスクスケール実験 (合成形状での学習・評価)")
    parser.add_argument("--work", type=Path, required=True, help="Working directory")
    parser.add_argument("--config", type=Path, default=None, help="key=value experiment config")
    parser.add_argument("--points", type=int, default=10000, help="Points per training cloud")
    parser.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    parser.add_argument("--seed", type=int, default=0, help="Dataset and noise seed")
    args = parser.parse_args(argv)

    configure_logging()
    config = ExperimentConfig.from_file(args.config)
    # 検証用に末尾1形状だけを残す
    train_update = {"val_meshes": 1}
    if args.epochs is not None:
        train_update["epochs"] = args.epochs
    config = config.model_copy(update={"train": config.train.model_copy(update=train_update)})

    with precision(settings.float_dtype):
        return run(args.work, config, [args.points], args.seed)


if __name__ == "__main__":
    sys.exit(main())
