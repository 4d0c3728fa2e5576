"""CLI subcommands

Each module owns a CommandRouter; main.py includes every router into one argparse parser.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Tuple
import argparse

Handler = Callable[[argparse.Namespace], int]


@dataclass
class Argument:
    """Deferred argparse.add_argument call"""

    flags: Tuple[str, ...]
    options: Dict[str, Any] = field(default_factory=dict)


def arg(*flags: str, **options: Any) -> Argument:
    return Argument(flags, options)


@dataclass
class Command:
    name: str
    help: str
    arguments: List[Argument]
    handler: Handler
    epilog: str = ""


class CommandRouter:
    """Collects subcommands declared with the @router.command decorator"""

    def __init__(self):
        self.commands: List[Command] = []

    def command(self, name: str, help: str, arguments: List[Argument] = (), epilog: str = ""):
        def decorator(fn: Handler) -> Handler:
            self.commands.append(Command(name, help, list(arguments), fn, epilog))
            return fn

        return decorator

    def register(self, subparsers) -> None:
        for command in self.commands:
            parser = subparsers.add_parser(
                command.name,
                help=command.help,
                description=command.help,
                epilog=command.epilog or None,
                formatter_class=argparse.RawDescriptionHelpFormatter,
            )
            for argument in command.arguments:
                parser.add_argument(*argument.flags, **argument.options)
            parser.set_defaults(handler=command.handler)
