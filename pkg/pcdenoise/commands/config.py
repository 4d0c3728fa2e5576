"""Experiment configuration commands"""

import argparse
import logging

from pcdenoise.commands import CommandRouter
from pcdenoise.core.errors import EXIT_OK
from pcdenoise.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

router = CommandRouter()


def config_keys_epilog() -> str:
    """--help text listing every config key with its default"""
    lines = ["config file keys (key=value, '#' comments):"]
    for key, default, description in ExperimentConfig.describe_keys():
        lines.append(f"  {key:<24} default {default:<24} {description}")
    return "\n".join(lines)


@router.command(
    "config-keys",
    help="Print every experiment config key with its default and description",
)
def config_keys(args: argparse.Namespace) -> int:
    for key, default, description in ExperimentConfig.describe_keys():
        print(f"{key}\t{default}\t{description}")
    return EXIT_OK
