"""Inference commands: denoise, benchmark, sweep-t-act"""

from pathlib import Path
from typing import List, Optional, Tuple
import argparse
import logging

from pydantic import ValidationError

from pcdenoise.commands import CommandRouter, arg
from pcdenoise.config import settings
from pcdenoise.core.checkpoint import load_checkpoint, load_into_store
from pcdenoise.core.denoiser import (
    DenoiserModel,
    DenoiseTrace,
    benchmark_overhead,
    denoise_cloud,
    sweep_activation_step,
)
from pcdenoise.core.errors import EXIT_OK, InvalidArgumentError
from pcdenoise.core.geometry import PointCloud
from pcdenoise.core.pointio import load_points, save_points
from pcdenoise.models.schemas import DenoiseSchedule, ExperimentConfig

logger = logging.getLogger(__name__)

router = CommandRouter()


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer list '{text}'")


def load_model(ckpt: Path, config: ExperimentConfig) -> DenoiserModel:
    """Model with the architecture of config and the parameters of ckpt"""
    model = DenoiserModel(config.model)
    load_into_store(load_checkpoint(ckpt), model.store, with_optimizer=False, path=str(ckpt))
    logger.info(f"Loaded {model.parameter_count()} parameters from {ckpt}")
    return model


def resolve_schedule(config: ExperimentConfig, t_act: Optional[int], n: int) -> DenoiseSchedule:
    """
    Inference schedule with the CLI overrides applied

    Raises:
        InvalidArgumentError: If --t-act lies outside [0, T]
    """
    update = config.denoise.model_dump()
    if t_act is not None:
        update["t_act"] = t_act
    if update["patch_size"] > n:
        logger.warning(f"Patch size {update['patch_size']} exceeds the cloud size {n}; using {n}")
        update["patch_size"] = n
    try:
        return DenoiseSchedule.model_validate(update)
    except ValidationError as e:
        raise InvalidArgumentError(f"invalid schedule: {e.errors()[0]['msg']}", t_act=t_act) from e


def _load_inputs(args: argparse.Namespace) -> Tuple[ExperimentConfig, DenoiserModel]:
    config = ExperimentConfig.from_file(args.config)
    return config, load_model(args.ckpt, config)


@router.command(
    "denoise",
    help="Denoise a point cloud with a trained checkpoint",
    arguments=[
        arg("--in", dest="input", required=True, type=Path, help="Noisy cloud (.xyz or .ply)"),
        arg("--ckpt", required=True, type=Path, help="Checkpoint with backbone and UniNet parameters"),
        arg("--config", type=Path, default=None, help="key=value experiment config (defaults when omitted)"),
        arg("--out", required=True, type=Path, help="Denoised cloud; same format as --in"),
        arg("--t-act", dest="t_act", type=int, default=None, help="Override denoise.t_act (T disables UniNet)"),
        arg("--workers", type=int, default=None, help="Patch worker threads (default PCD_WORKERS)"),
    ],
)
def denoise(args: argparse.Namespace) -> int:
    if args.out.suffix.lower() != args.input.suffix.lower():
        raise InvalidArgumentError(
            f"output format {args.out.suffix} must match input format {args.input.suffix}",
            input=str(args.input),
            out=str(args.out),
        )
    noisy = load_points(args.input)
    config, model = _load_inputs(args)
    schedule = resolve_schedule(config, args.t_act, noisy.n)

    trace = DenoiseTrace()
    denoised = denoise_cloud(noisy, model, schedule, workers=args.workers or settings.workers, trace=trace)
    save_points(args.out, denoised)
    if trace.uninet_displacement:
        mean_disp = sum(trace.uninet_displacement) / len(trace.uninet_displacement)
        logger.info(f"Mean UniNet displacement per active step: {mean_disp:.6e}")
    logger.info(f"Wrote {denoised.n} denoised points to {args.out}")
    return EXIT_OK


@router.command(
    "benchmark",
    help="Measure the parameter and wall-clock overhead of UniNet on one cloud",
    arguments=[
        arg("--in", dest="input", required=True, type=Path, help="Noisy cloud (.xyz or .ply)"),
        arg("--ckpt", required=True, type=Path, help="Checkpoint"),
        arg("--config", type=Path, default=None, help="key=value experiment config"),
        arg("--workers", type=int, default=1, help="Patch worker threads"),
    ],
)
def benchmark(args: argparse.Namespace) -> int:
    noisy = load_points(args.input)
    config, model = _load_inputs(args)
    schedule = resolve_schedule(config, None, noisy.n)
    result = benchmark_overhead(noisy, model, schedule, workers=args.workers)
    for key, value in result.items():
        print(f"{key}\t{value:.6g}")
    return EXIT_OK


@router.command(
    "sweep-t-act",
    help="CD and uniformity of the denoised cloud for several UniNet activation steps",
    arguments=[
        arg("--noisy", required=True, type=Path, help="Noisy cloud"),
        arg("--clean", required=True, type=Path, help="Clean reference cloud"),
        arg("--ckpt", required=True, type=Path, help="Checkpoint"),
        arg("--config", type=Path, default=None, help="key=value experiment config"),
        arg("--t-acts", dest="t_acts", required=True, type=parse_int_list, help="Comma-separated steps, e.g. 0,10,20,30"),
        arg("--workers", type=int, default=1, help="Patch worker threads"),
    ],
)
def sweep_t_act(args: argparse.Namespace) -> int:
    noisy: PointCloud = load_points(args.noisy)
    clean = load_points(args.clean)
    config, model = _load_inputs(args)
    schedule = resolve_schedule(config, None, noisy.n)
    rows = sweep_activation_step(noisy, clean, model, schedule, args.t_acts, config.uniformity, workers=args.workers)
    print("t_act\tcd_x1e4\tuni_x1e3")
    for row in rows:
        print(f"{int(row['t_act'])}\t{row['cd'] * 1e4:.6f}\t{row['uniformity'] * 1e3:.6f}")
    return EXIT_OK
