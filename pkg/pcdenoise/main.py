"""Command-line entry point"""

from typing import List, Optional
import argparse
import json
import logging
import sys

from pcdenoise import __version__
from pcdenoise.config import settings
from pcdenoise.commands import config, dataset, denoise, evaluate, train
from pcdenoise.core.autodiff import precision
from pcdenoise.core.errors import EXIT_NUMERIC_FAILURE, PointCloudError

logger = logging.getLogger(__name__)

TEXT_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class JsonFormatter(logging.Formatter):
    """One JSON object per log record"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": self.formatTime(record),
            "logger": record.name,
            "level": record.levelname,
            "message": record.getMessage(),
        }
        error = getattr(record, "error", None)
        if error is not None:
            payload["error"] = error
        if record.exc_info:
            payload["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, default=str)


def resolve_log_level() -> int:
    """PCD_DEBUG forces DEBUG; otherwise PCD_LOG_LEVEL"""
    if settings.debug:
        return logging.DEBUG
    return getattr(logging, settings.log_level, logging.INFO)


def configure_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    if settings.log_format == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))
    # no-op when the root logger already has handlers (embedding applications, pytest)
    logging.basicConfig(
        level=resolve_log_level(),
        handlers=[handler],
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcdenoise",
        description="点群ノイズ除去ツールキット - gradient-field denoising with UniNet uniformity refinement",
        epilog=config.config_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    # Include routers
    for router in (dataset.router, train.router, denoise.router, evaluate.router, config.router):
        router.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run one subcommand

    Returns:
        Exit code: 0 success, 1 numeric failure, 2 usage error (argparse exits with 2 itself)
    """
    configure_logging()
    args = build_parser().parse_args(argv)
    logger.debug(f"Running {args.command} in {settings.environment} mode ({settings.float_dtype})")

    try:
        with precision(settings.float_dtype):
            return args.handler(args)
    except PointCloudError as e:
        logger.error(f"{e.error_code}: {e.message}", extra={"error": e.to_dict()})
        if e.details:
            logger.debug(f"details: {e.details}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        return EXIT_NUMERIC_FAILURE
