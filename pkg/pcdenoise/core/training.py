"""Dataset synthesis and the two-stage training recipe

Stage 1 pretrains the feature extractor and gradient head on the score-matching target.
Stage 2 freezes them and trains UniNet on the exact EMD between refined and clean patches.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union
import csv
import logging
import math

import numpy as np
from scipy.spatial.transform import Rotation

from pcdenoise.core.autodiff import Tensor, backward, mean_squared_error, objective, no_grad, scale
from pcdenoise.core.checkpoint import from_store, load_checkpoint, load_into_store, save_checkpoint
from pcdenoise.core.denoiser import (
    BACKBONE_PREFIXES,
    UNINET_PREFIX,
    DenoiserModel,
    estimate_gradient,
    uninet_refine,
)
from pcdenoise.core.errors import (
    DatasetIOError,
    InvalidArgumentError,
    NumericFailureError,
    TrainingOrderError,
)
from pcdenoise.core.geometry import PointCloud, SpatialIndex, normalize_unit_sphere, random_patch
from pcdenoise.core.mesh_sampling import Mesh, poisson_disk_sample
from pcdenoise.core.metrics import chamfer, emd, emd_gradient
from pcdenoise.core.noise import training_noise_std
from pcdenoise.core.pointio import load_points, save_points
from pcdenoise.models.schemas import (
    DenoiseSchedule,
    ExperimentConfig,
    ManifestEntry,
    TrainingConfig,
    TrainingLogRow,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
STAGE_BACKBONE = "backbone"
STAGE_UNINET = "uninet"
_STAGE_CODES = {STAGE_BACKBONE: 0, STAGE_UNINET: 1}

LOG_COLUMNS = ["stage", "epoch", "lr", "train_loss", "val_cd", "val_emd", "val_emd_identity", "val_disp"]


# --- dataset -----------------------------------------------------------------


def write_manifest(path: Union[str, Path], entries: Sequence[ManifestEntry]) -> None:
    """mesh_id TAB count TAB path TAB cx cy cz TAB scale, one line per cloud"""
    lines = []
    for e in entries:
        center = " ".join(repr(float(c)) for c in e.center)
        lines.append(f"{e.mesh_id}\t{e.count}\t{e.path}\t{center}\t{repr(float(e.scale))}\n")
    try:
        Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")
    except OSError as e:
        raise DatasetIOError(str(path), str(e)) from e


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(str(path), str(e)) from e

    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DatasetIOError(str(path), f"line {lineno}: expected 5 tab-separated fields")
        try:
            center = tuple(float(c) for c in fields[3].split(" "))
            entries.append(
                ManifestEntry(
                    mesh_id=fields[0],
                    count=int(fields[1]),
                    path=fields[2],
                    center=center,
                    scale=float(fields[4]),
                )
            )
        except ValueError as e:
            raise DatasetIOError(str(path), f"line {lineno}: {e}") from e
    return entries


def cloud_seed(seed: int, mesh_index: int, count: int) -> int:
    """Independent sampling seed per (mesh, count)"""
    return int(np.random.SeedSequence([seed, mesh_index, count]).generate_state(1)[0])


def build_dataset(
    meshes: Sequence[Tuple[str, Mesh]],
    counts: Sequence[int],
    out_dir: Union[str, Path],
    seed: int,
) -> List[ManifestEntry]:
    """
    Poisson-disk clean clouds for every mesh and count, normalized to the unit sphere

    Args:
        meshes: (mesh_id, Mesh) pairs
        counts: Point counts per mesh
        out_dir: Directory receiving <mesh_id>_<count>.xyz files and manifest.tsv
        seed: Base seed

    Returns:
        Manifest entries in write order
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for mesh_index, (mesh_id, mesh) in enumerate(meshes):
        for count in counts:
            cloud = poisson_disk_sample(mesh, count, cloud_seed(seed, mesh_index, count))
            normalized, center, cloud_scale = normalize_unit_sphere(cloud)
            name = f"{mesh_id}_{count}.xyz"
            save_points(out_dir / name, normalized)
            entries.append(
                ManifestEntry(
                    mesh_id=mesh_id,
                    count=count,
                    path=name,
                    center=tuple(float(c) for c in center),
                    scale=cloud_scale,
                )
            )
            logger.info(f"Sampled {count} points from {mesh_id}")
    write_manifest(out_dir / MANIFEST_NAME, entries)
    return entries


def load_dataset(manifest_path: Union[str, Path]) -> List[Tuple[ManifestEntry, PointCloud]]:
    manifest_path = Path(manifest_path)
    dataset = []
    for entry in read_manifest(manifest_path):
        path = Path(entry.path)
        if not path.is_absolute():
            path = manifest_path.parent / path
        dataset.append((entry, load_points(path)))
    return dataset


def split_validation(
    dataset: Sequence[Tuple[ManifestEntry, PointCloud]], val_meshes: int
) -> Tuple[List[PointCloud], List[PointCloud]]:
    """The clouds of the last val_meshes distinct meshes are held out"""
    mesh_ids: List[str] = []
    for entry, _ in dataset:
        if entry.mesh_id not in mesh_ids:
            mesh_ids.append(entry.mesh_id)
    if len(mesh_ids) <= val_meshes:
        raise InvalidArgumentError(
            f"{len(mesh_ids)} meshes leave nothing to train on with {val_meshes} held out",
            meshes=len(mesh_ids),
            val_meshes=val_meshes,
        )
    held_out = set(mesh_ids[len(mesh_ids) - val_meshes:])
    train = [cloud for entry, cloud in dataset if entry.mesh_id not in held_out]
    val = [cloud for entry, cloud in dataset if entry.mesh_id in held_out]
    return train, val


# --- training pairs ----------------------------------------------------------


@dataclass(frozen=True)
class TrainingPair:
    """Noisy and clean patch in the noisy patch's normalized frame, with score targets"""

    noisy: np.ndarray
    clean: np.ndarray
    targets: np.ndarray
    noise_std: float


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation by a uniform angle about a uniformly distributed axis"""
    axis = rng.standard_normal(3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def similarity_about_centroid(points: np.ndarray, rotation: np.ndarray, factor: float) -> np.ndarray:
    """
    Rotate and scale points about their centroid

    The identity transform returns an unchanged copy (no round trip through the centroid).
    """
    if factor == 1.0 and np.array_equal(rotation, np.eye(3)):
        return points.copy()
    center = points.mean(axis=0)
    return factor * ((points - center) @ rotation.T) + center


def augment(points: np.ndarray, rng: np.random.Generator, cfg: TrainingConfig) -> np.ndarray:
    """Random scale and rotation about the patch centroid"""
    factor = rng.uniform(cfg.scale_min, cfg.scale_max)
    rotation = random_rotation(rng) if cfg.rotate else np.eye(3)
    return similarity_about_centroid(points, rotation, factor)


def score_targets(noisy: np.ndarray, clean: np.ndarray, k: int) -> np.ndarray:
    """Mean of the k nearest clean points minus each noisy point"""
    graph = SpatialIndex(PointCloud(clean)).query(noisy, k)
    return clean[graph.indices].mean(axis=1) - noisy


def sample_training_pair(
    clean: PointCloud,
    cfg: TrainingConfig,
    rng: np.random.Generator,
    index: Optional[SpatialIndex] = None,
    augmented: bool = True,
) -> TrainingPair:
    """
    Draw one training patch

    A random seed's patch_size-NN clean patch is augmented, corrupted with isotropic
    Gaussian noise of a per-patch std in cloud units, then both patches are moved into the
    normalized frame of the noisy patch.

    Raises:
        InvalidArgumentError: If the cloud is smaller than the patch size
    """
    if clean.n < cfg.patch_size:
        raise InvalidArgumentError(
            f"cloud of {clean.n} points is smaller than the patch size {cfg.patch_size}",
            n=clean.n,
            patch_size=cfg.patch_size,
        )
    patch = random_patch(clean, cfg.patch_size, rng, index)
    y = clean.points[patch.cloud.source_index]
    if augmented:
        y = augment(y, rng, cfg)
    std = training_noise_std(rng, cfg.noise_std_min, cfg.noise_std_max)
    x = y + rng.normal(0.0, std, size=y.shape)

    noisy, center, frame_scale = normalize_unit_sphere(PointCloud(x))
    y = (y - center) / frame_scale
    return TrainingPair(
        noisy=noisy.points,
        clean=y,
        targets=score_targets(noisy.points, y, cfg.k_target),
        noise_std=std,
    )


def lr_at_epoch(cfg: TrainingConfig, epoch: int) -> float:
    """lr0 * decay^(number of milestones <= epoch)"""
    passed = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.lr * cfg.lr_decay**passed


# --- losses ------------------------------------------------------------------


def backbone_loss(model: DenoiserModel, pair: TrainingPair) -> Tensor:
    """Mean squared error between the estimated field at the noisy points and the score targets"""
    noisy = PointCloud(pair.noisy)
    index = SpatialIndex(noisy)
    features = model.features(noisy, index)
    field = estimate_gradient(noisy.points, noisy, features, model, index)
    return mean_squared_error(field, pair.targets)


def backbone_iterate(model: DenoiserModel, noisy: np.ndarray, schedule: DenoiseSchedule, steps: int) -> np.ndarray:
    """steps gradient-ascent updates without UniNet"""
    cloud = PointCloud(noisy)
    with no_grad():
        index = SpatialIndex(cloud)
        projected = model.gradient.project(model.features(cloud, index))
        x = cloud.points.copy()
        for t in range(steps):
            x = x + schedule.step_size(t) * model.gradient(x, cloud, projected, index).values
    return x


def uninet_step_factor(schedule: DenoiseSchedule, steps: int) -> float:
    return schedule.step_size(max(steps - 1, 0)) if schedule.scale_uninet else 1.0


def uninet_loss(model: DenoiserModel, x_prime: np.ndarray, clean: np.ndarray, factor: float = 1.0) -> Tensor:
    """EMD between the refined points and the clean patch, differentiated through UniNet"""
    displacement = uninet_refine(x_prime, model)
    refined = PointCloud(x_prime + factor * displacement.values)
    target = PointCloud(clean)
    value, assignment = emd(refined, target)
    gradient = factor * emd_gradient(refined, target, assignment)
    return objective(displacement, value, gradient)


def optimizer_step(model: DenoiserModel, items: Sequence, lr: float,
                   loss_fn: Callable[..., Tensor]) -> float:
    """
    Accumulate the batch-mean loss gradient in item order, then take one Adam step

    Returns:
        Batch-mean loss (may be non-finite; no update is taken then)
    """
    store = model.store
    store.zero_grad()
    total = 0.0
    for item in items:
        loss = loss_fn(item)
        backward(scale(loss, 1.0 / len(items)))
        total += float(loss.values)
    total /= len(items)
    if math.isfinite(total):
        store.adam_step(lr)
    return total


# --- trainer -----------------------------------------------------------------


class Trainer:
    """
    Owns the model, data, RNG streams, CSV log and checkpoints of one training stage

    Every epoch draws its patches from its own stream seeded by (seed, stage, epoch), so a run
    resumed from last.ckpt repeats the uninterrupted run exactly.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        manifest_path: Union[str, Path],
        out_path: Union[str, Path],
        model: Optional[DenoiserModel] = None,
    ):
        self.config = config
        self.cfg = config.train
        self.schedule = config.denoise
        self.model = model or DenoiserModel(config.model)
        self.store = self.model.store

        self.best_path = Path(out_path)
        self.last_path = self.best_path.with_suffix(".last.ckpt")
        self.log_path = self.best_path.with_suffix(".csv")

        dataset = load_dataset(manifest_path)
        self.train_clouds, val_clouds = split_validation(dataset, self.cfg.val_meshes)
        self.train_indices = [SpatialIndex(c) for c in self.train_clouds]
        self.val_pairs = self._validation_pairs(val_clouds)

        self.stage: Optional[str] = None
        self.start_epoch = 0
        self.best = math.inf
        self.backbone_ready = False
        self.identity_emd: Optional[float] = None
        logger.info(
            f"Trainer: {len(self.train_clouds)} training clouds, {len(self.val_pairs)} validation patches, "
            f"{self.model.parameter_count()} parameters"
        )

    # -- state ----------------------------------------------------------------

    def _stream(self, *keys: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, *keys])

    def _validation_pairs(self, clouds: Sequence[PointCloud]) -> List[TrainingPair]:
        rng = self._stream(0)
        return [
            sample_training_pair(cloud, self.cfg, rng, augmented=False)
            for cloud in clouds
            for _ in range(self.cfg.val_patches)
        ]

    def load_backbone(self, path: Union[str, Path]) -> None:
        """Load trained backbone weights; the optimizer state is discarded"""
        checkpoint = load_checkpoint(path)
        load_into_store(checkpoint, self.store, with_optimizer=False, path=str(path))
        self.backbone_ready = True
        logger.info(f"Loaded backbone from {path}")

    def resume(self, path: Union[str, Path], stage: Optional[str] = None) -> None:
        """
        Continue a stage from its last checkpoint (parameters, moments, step, epoch)

        Args:
            path: A .last.ckpt written by this trainer
            stage: Stage about to be run; must match the stage stored in the checkpoint

        Raises:
            TrainingOrderError: If the checkpoint belongs to another stage
        """
        checkpoint = load_checkpoint(path)
        code = int(checkpoint.meta("stage"))
        stored = STAGE_UNINET if code == _STAGE_CODES[STAGE_UNINET] else STAGE_BACKBONE
        if stage is not None and stage != stored:
            raise TrainingOrderError(
                f"checkpoint {path} was written by stage {stored} and cannot resume stage {stage}"
            )
        load_into_store(checkpoint, self.store, with_optimizer=True, path=str(path))
        self.stage = stored
        self.start_epoch = int(checkpoint.meta("epoch"))
        self.best = checkpoint.meta("best", math.inf)
        # a uninet checkpoint always carries the frozen backbone it was trained on
        self.backbone_ready = stored == STAGE_UNINET
        logger.info(f"Resuming {self.stage} stage at epoch {self.start_epoch}, step {self.store.step}")

    def _save(self, path: Path, epoch: int) -> None:
        meta = {"stage": _STAGE_CODES[self.stage], "epoch": epoch, "best": self.best}
        save_checkpoint(path, from_store(self.store, **meta))

    def _begin_stage(self, stage: str) -> None:
        if self.stage != stage:
            self.stage = stage
            self.start_epoch = 0
            self.best = math.inf
            self.store.reset_optimizer()
        if self.start_epoch == 0 and self.log_path.exists():
            self.log_path.unlink()

        if stage == STAGE_BACKBONE:
            for prefix in BACKBONE_PREFIXES:
                self.store.unfreeze(prefix)
            self.store.freeze(UNINET_PREFIX)
        else:
            for prefix in BACKBONE_PREFIXES:
                self.store.freeze(prefix)
            self.store.unfreeze(UNINET_PREFIX)

    def _log(self, row: TrainingLogRow) -> None:
        new_file = not self.log_path.exists()
        values = row.model_dump()
        with open(self.log_path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            if new_file:
                writer.writeheader()
            writer.writerow({k: "" if values.get(k) is None else values[k] for k in LOG_COLUMNS})

    def _step(self, items: Sequence, lr: float, loss_fn: Callable[..., Tensor], epoch: int) -> float:
        snapshot = self.store.snapshot()
        try:
            loss = optimizer_step(self.model, items, lr, loss_fn)
            if not math.isfinite(loss):
                raise NumericFailureError("training loss is NaN or Inf", iteration=self.store.step + 1)
        except NumericFailureError:
            self.store.restore(snapshot)
            self._save(self.last_path, epoch)
            logger.error(f"{self.stage} training diverged; last good parameters saved to {self.last_path}")
            raise
        return loss

    def _end_epoch(self, row: TrainingLogRow, score: float) -> None:
        self._log(row)
        if score < self.best:
            self.best = score
            self._save(self.best_path, row.epoch + 1)
        self._save(self.last_path, row.epoch + 1)
        logger.info(
            f"[{row.stage}] epoch {row.epoch} lr={row.lr:.3e} loss={row.train_loss:.6e} "
            f"val_cd={row.val_cd} val_emd={row.val_emd}"
        )

    def _draw_pairs(self, rng: np.random.Generator) -> List[TrainingPair]:
        pairs = []
        for _ in range(self.cfg.batch_size):
            c = int(rng.integers(len(self.train_clouds)))
            pairs.append(sample_training_pair(self.train_clouds[c], self.cfg, rng, self.train_indices[c]))
        return pairs

    # -- stage 1 --------------------------------------------------------------

    def validate_backbone(self) -> Optional[float]:
        """Mean CD to the clean patch after one unit-step gradient move"""
        if not self.val_pairs:
            return None
        scores = []
        with no_grad():
            for pair in self.val_pairs:
                noisy = PointCloud(pair.noisy)
                index = SpatialIndex(noisy)
                field = estimate_gradient(noisy.points, noisy, self.model.features(noisy, index), self.model, index)
                scores.append(chamfer(PointCloud(noisy.points + field.values), PointCloud(pair.clean)))
        return float(np.mean(scores))

    def pretrain_backbone(self, epochs: Optional[int] = None) -> DenoiserModel:
        """
        Minimize the score-matching loss with Adam and the step-decay schedule

        Raises:
            NumericFailureError: On a NaN/Inf loss, after saving the last good parameters
        """
        epochs = epochs or self.cfg.epochs
        self._begin_stage(STAGE_BACKBONE)

        def loss_fn(pair):
            return backbone_loss(self.model, pair)

        for epoch in range(self.start_epoch, epochs):
            lr = lr_at_epoch(self.cfg, epoch)
            rng = self._stream(1, epoch)
            losses = [self._step(self._draw_pairs(rng), lr, loss_fn, epoch) for _ in range(self.cfg.steps_per_epoch)]
            train_loss = float(np.mean(losses))
            val_cd = self.validate_backbone()
            row = TrainingLogRow(stage=STAGE_BACKBONE, epoch=epoch, lr=lr, train_loss=train_loss, val_cd=val_cd)
            self._end_epoch(row, train_loss if val_cd is None else val_cd)

        self.start_epoch = epochs
        self.backbone_ready = True
        return self.model

    # -- stage 2 --------------------------------------------------------------

    def _validation_inputs(self) -> List[np.ndarray]:
        # 凍結済みバックボーンの出力は固定なので一度だけ計算する
        return [backbone_iterate(self.model, p.noisy, self.schedule, self.schedule.t_act) for p in self.val_pairs]

    def validate_uninet(self, inputs: Sequence[np.ndarray]) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        """(mean CD, mean EMD, mean displacement norm) of refined validation patches"""
        if not self.val_pairs:
            return None, None, None
        factor = uninet_step_factor(self.schedule, self.schedule.t_act)
        cds, emds, disps = [], [], []
        with no_grad():
            for pair, x_prime in zip(self.val_pairs, inputs):
                d = factor * uninet_refine(x_prime, self.model).values
                refined = PointCloud(x_prime + d)
                clean = PointCloud(pair.clean)
                cds.append(chamfer(refined, clean))
                emds.append(emd(refined, clean)[0])
                disps.append(float(np.linalg.norm(d, axis=1).mean()))
        return float(np.mean(cds)), float(np.mean(emds)), float(np.mean(disps))

    def identity_validation_emd(self, inputs: Sequence[np.ndarray]) -> Optional[float]:
        """Validation EMD with a zero UniNet displacement"""
        if not self.val_pairs:
            return None
        return float(np.mean([emd(PointCloud(x), PointCloud(p.clean))[0] for p, x in zip(self.val_pairs, inputs)]))

    def train_uninet(self, epochs: Optional[int] = None) -> DenoiserModel:
        """
        Train UniNet with EMD on frozen-backbone iterates

        Each item runs the frozen backbone for a random number of steps in [T_act, T],
        refines once with UniNet and backpropagates the fixed-matching EMD subgradient.

        Raises:
            TrainingOrderError: If no trained backbone has been loaded
        """
        if not self.backbone_ready:
            raise TrainingOrderError()
        epochs = epochs or self.cfg.epochs
        self._begin_stage(STAGE_UNINET)

        inputs = self._validation_inputs()
        self.identity_emd = self.identity_validation_emd(inputs)
        logger.info(f"Identity UniNet validation EMD: {self.identity_emd}")

        def loss_fn(item):
            pair, steps = item
            x_prime = backbone_iterate(self.model, pair.noisy, self.schedule, steps)
            return uninet_loss(self.model, x_prime, pair.clean, uninet_step_factor(self.schedule, steps))

        for epoch in range(self.start_epoch, epochs):
            lr = lr_at_epoch(self.cfg, epoch)
            rng = self._stream(2, epoch)
            losses = []
            for _ in range(self.cfg.steps_per_epoch):
                pairs = self._draw_pairs(rng)
                items = [(p, int(rng.integers(self.schedule.t_act, self.schedule.T + 1))) for p in pairs]
                losses.append(self._step(items, lr, loss_fn, epoch))
            train_loss = float(np.mean(losses))
            val_cd, val_emd, val_disp = self.validate_uninet(inputs)
            row = TrainingLogRow(
                stage=STAGE_UNINET, epoch=epoch, lr=lr, train_loss=train_loss,
                val_cd=val_cd, val_emd=val_emd, val_emd_identity=self.identity_emd, val_disp=val_disp,
            )
            self._end_epoch(row, train_loss if val_emd is None else val_emd)

        self.start_epoch = epochs
        return self.model
