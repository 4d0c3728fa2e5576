"""Metric report command"""

from pathlib import Path
import argparse
import logging

from pcdenoise.commands import CommandRouter, arg
from pcdenoise.core.errors import EXIT_OK, DatasetIOError
from pcdenoise.core.mesh_sampling import Mesh
from pcdenoise.core.metrics import evaluate_clouds, format_report_tsv
from pcdenoise.core.pointio import load_points
from pcdenoise.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command(
    "evaluate",
    help="Compute CD, P2M, uniformity and EMD of a denoised cloud and append them to a TSV report",
    arguments=[
        arg("--denoised", required=True, type=Path, help="Denoised cloud"),
        arg("--clean", required=True, type=Path, help="Clean reference cloud"),
        arg("--mesh", type=Path, default=None, help="Ground-truth mesh for P2M"),
        arg("--report", required=True, type=Path, help="TSV report; rows are appended"),
        arg("--shape", default="-", help="Shape label of the report row"),
        arg("--noise", default="-", help="Noise label of the report row"),
        arg("--config", type=Path, default=None, help="key=value experiment config (uniformity.* keys)"),
    ],
    epilog="Columns: cd_x1e4, p2m_x1e4, uni_x1e3 are scaled by 1e4, 1e4 and 1e3; missing values read 'nan'.",
)
def evaluate(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_file(args.config)
    denoised = load_points(args.denoised)
    clean = load_points(args.clean)
    mesh = Mesh.from_file(args.mesh) if args.mesh is not None else None

    report = evaluate_clouds(denoised, clean, mesh, config.uniformity)
    new_file = not args.report.exists() or args.report.stat().st_size == 0
    text = format_report_tsv([report.to_row(args.shape, args.noise)], header=new_file)
    try:
        with open(args.report, "a", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise DatasetIOError(str(args.report), str(e)) from e

    logger.info(
        f"cd={report.scaled_cd:.4f}e-4 uni={report.scaled_uniformity:.4f}e-3 "
        f"p2m={report.scaled_p2m} emd={report.emd}"
    )
    return EXIT_OK
