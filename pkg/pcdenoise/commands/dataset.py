"""Dataset synthesis and corruption commands"""

from pathlib import Path
import argparse
import logging

from pcdenoise.commands import CommandRouter, arg
from pcdenoise.config import settings
from pcdenoise.core.errors import EXIT_OK, DatasetIOError, InvalidArgumentError, PointCloudError
from pcdenoise.core.mesh_sampling import Mesh
from pcdenoise.core.noise import apply_noise, resolve_kind
from pcdenoise.core.pointio import load_points, save_points
from pcdenoise.core.training import MANIFEST_NAME, build_dataset
from pcdenoise.models.schemas import NoiseSpec

logger = logging.getLogger(__name__)

router = CommandRouter()


def parse_counts(text: str):
    """'10000,20000' -> [10000, 20000]"""
    try:
        counts = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid count list '{text}'")
    if not counts or any(c < 1 for c in counts):
        raise argparse.ArgumentTypeError("counts must be positive integers")
    return counts


@router.command(
    "make-dataset",
    help="Poisson-disk sample every mesh in a directory into unit-sphere clean clouds",
    arguments=[
        arg("--meshes", required=True, type=Path, help="Directory of OBJ/PLY meshes"),
        arg("--counts", required=True, type=parse_counts, help="Comma-separated point counts, e.g. 10000,50000"),
        arg("--out", required=True, type=Path, help="Output directory for clouds and manifest.tsv"),
        arg("--seed", required=True, type=int, help="Sampling seed"),
    ],
)
def make_dataset(args: argparse.Namespace) -> int:
    mesh_dir: Path = args.meshes
    if not mesh_dir.is_dir():
        raise DatasetIOError(str(mesh_dir), "mesh directory not found")
    paths = sorted(p for p in mesh_dir.iterdir() if p.suffix.lower() in settings.mesh_suffixes)
    if not paths:
        raise DatasetIOError(str(mesh_dir), "no mesh files found")

    meshes = []
    for path in paths:
        try:
            meshes.append((path.stem, Mesh.from_file(path)))
        except PointCloudError as e:
            logger.warning(f"Skipping mesh {path.name}: {e.message}")
    if not meshes:
        raise DatasetIOError(str(mesh_dir), "every mesh failed to load")

    entries = build_dataset(meshes, args.counts, args.out, args.seed)
    logger.info(f"Wrote {len(entries)} clouds and {args.out / MANIFEST_NAME}")
    return EXIT_OK


@router.command(
    "add-noise",
    help="Corrupt a clean cloud with one of the analytic noise models",
    arguments=[
        arg("--in", dest="input", required=True, type=Path, help="Clean cloud (.xyz or .ply)"),
        arg("--kind", required=True, help="isotropic_gaussian, laplace, discrete, anisotropic_gaussian, "
                                          "unidirectional_gaussian or uniform_ball (aliases: gaussian, "
                                          "anisotropic, unidirectional, uniform)"),
        arg("--scale", required=True, type=float, help="Noise scale s relative to the unit bounding sphere"),
        arg("--seed", required=True, type=int, help="Noise seed"),
        arg("--out", required=True, type=Path, help="Noisy cloud (.xyz or .ply)"),
    ],
)
def add_noise(args: argparse.Namespace) -> int:
    kind = resolve_kind(args.kind)
    if not args.scale > 0:
        raise InvalidArgumentError("--scale must be positive", scale=args.scale)
    if args.seed < 0:
        raise InvalidArgumentError("--seed must be non-negative", seed=args.seed)
    spec = NoiseSpec(kind=kind, scale=args.scale, seed=args.seed)

    clean = load_points(args.input)
    noisy = apply_noise(clean, spec)
    save_points(args.out, noisy)
    logger.info(f"Wrote {noisy.n} points with {kind.value} noise (s={args.scale}) to {args.out}")
    return EXIT_OK
