from argparse import ArgumentParser
from typing import List, Optional
import logging
import sys

from app.commands import EXIT_USAGE, BaseCommand
from app.commands import evaluate, export_embeddings, prepare, train
from app.config import settings

# Configure logging
logging.basicConfig(level=settings.log_level.upper(), format=settings.log_format)
logger = logging.getLogger(__name__)

COMMANDS = {
    "prepare": prepare.Command,
    "train": train.Command,
    "eval": evaluate.Command,
    "export-embeddings": export_embeddings.Command,
}


def build_parser(commands: dict) -> ArgumentParser:
    parser = ArgumentParser(prog="kgic", description="Knowledge-aware recommender with interactive contrastive learning")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, command in commands.items():
        sub = subparsers.add_parser(name, help=command.help, description=command.help)
        command.add_arguments(sub)
    return parser


def main(argv: Optional[List[str]] = None, stdout=None) -> int:
    """Run one subcommand and return its exit code"""
    commands = {name: cls(stdout=stdout) for name, cls in COMMANDS.items()}
    parser = build_parser(commands)
    try:
        options = vars(parser.parse_args(argv))
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help
        return EXIT_USAGE if e.code else 0

    command: BaseCommand = commands[options.pop("command")]
    logger.info(f"Running {type(command).__module__.rsplit('.', 1)[-1]} in {settings.environment} mode")
    return command.execute(**options)


if __name__ == "__main__":
    sys.exit(main())
