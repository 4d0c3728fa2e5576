"""Two-stage training command"""

from pathlib import Path
import argparse
import logging

from pcdenoise.commands import CommandRouter, arg
from pcdenoise.core.errors import EXIT_OK, DatasetIOError, TrainingOrderError
from pcdenoise.core.training import MANIFEST_NAME, STAGE_BACKBONE, STAGE_UNINET, Trainer
from pcdenoise.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command(
    "train",
    help="Pretrain the gradient-field backbone, or train UniNet on a frozen backbone",
    arguments=[
        arg("--stage", required=True, choices=[STAGE_BACKBONE, STAGE_UNINET], help="Training stage"),
        arg("--config", type=Path, default=None, help="key=value experiment config (defaults when omitted)"),
        arg("--data", required=True, type=Path, help="Dataset directory containing manifest.tsv"),
        arg("--out", required=True, type=Path, help="Best checkpoint path; .last.ckpt and .csv are written beside it"),
        arg("--backbone", type=Path, default=None, help="Trained backbone checkpoint (required for --stage uninet)"),
        arg("--resume", type=Path, default=None, help="Continue from a .last.ckpt of the same stage"),
        arg("--epochs", type=int, default=None, help="Override train.epochs"),
    ],
    epilog="Stage uninet freezes the backbone; run stage backbone first.",
)
def train(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_file(args.config)
    manifest = args.data / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetIOError(str(manifest), "manifest not found; run make-dataset first")
    if args.stage == STAGE_UNINET and args.backbone is None and args.resume is None:
        raise TrainingOrderError("stage uninet needs --backbone (or --resume) with a trained backbone checkpoint")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, manifest, args.out)
    if args.backbone is not None:
        trainer.load_backbone(args.backbone)
    if args.resume is not None:
        trainer.resume(args.resume, args.stage)

    if args.stage == STAGE_BACKBONE:
        trainer.pretrain_backbone(args.epochs)
    else:
        trainer.train_uninet(args.epochs)

    logger.info(f"Training finished: best checkpoint {trainer.best_path}, log {trainer.log_path}")
    return EXIT_OK
