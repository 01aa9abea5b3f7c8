from argparse import ArgumentParser
from pathlib import Path
from typing import Any, Dict, Optional, TextIO
import logging
import sys

from app.config import build_run_config, settings, write_effective_config
from app.errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    DivergenceError,
    KGICError,
    MetricError,
)
from app.models import RunConfig
from app.store import DataStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_CHECKPOINT = 4

# flag -> RunConfig field for every hyper-parameter override
HYPER_FLAGS = {
    "--L": ("L", int),
    "--J": ("J", int),
    "--tau": ("tau", float),
    "--alpha": ("alpha", float),
    "--lambda1": ("lambda1", float),
    "--lambda2": ("lambda2", float),
    "--eta": ("eta", float),
    "--d": ("d", int),
    "--batch-size": ("batch_size", int),
    "--local-size": ("local_size", int),
    "--nonlocal-size": ("nonlocal_size", int),
    "--epochs": ("epochs", int),
    "--patience": ("patience", int),
    "--seed": ("seed", int),
    "--threads": ("threads", int),
    "--precision": ("precision", int),
}

SWITCH_FLAGS = {
    "--disable-intra": "disable_intra",
    "--disable-inter": "disable_inter",
    "--disable-nonlocal": "disable_nonlocal",
    "--symmetric-inter": "symmetric_inter",
}

CHOICE_FLAGS = {
    "--similarity": ("similarity", ["dot", "cosine"]),
    "--activation": ("activation", ["relu", "leaky_relu"]),
    "--l2-mode": ("l2_mode", ["batch", "full"]),
    "--optimizer": ("optimizer", ["lazy", "dense"]),
}


class CommandError(Exception):
    def __init__(self, message: str, returncode: int = EXIT_USAGE):
        self.returncode = returncode
        super().__init__(message)


def exit_code(error: BaseException) -> int:
    """Documented exit code for an error raised while running a command"""
    if isinstance(error, CommandError):
        return error.returncode
    if isinstance(error, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(error, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(error, (ConfigError, DataFormatError, AlignmentError, MetricError, OSError)):
        return EXIT_USAGE
    return EXIT_UNEXPECTED


class BaseCommand:
    """One subcommand: declares its flags and does its work in `handle`"""

    help = ""

    def __init__(self, stdout: Optional[TextIO] = None):
        self.stdout = stdout or sys.stdout

    def add_arguments(self, parser: ArgumentParser) -> None:
        pass

    def handle(self, **options: Any) -> None:
        raise NotImplementedError

    def write(self, text: str) -> None:
        self.stdout.write(text if text.endswith("\n") else text + "\n")

    def execute(self, **options: Any) -> int:
        try:
            self.handle(**options)
        except (KGICError, CommandError, OSError) as e:
            logger.error(str(e))
            return exit_code(e)
        except Exception:
            logger.exception("Unexpected failure")
            return EXIT_UNEXPECTED
        return EXIT_OK


def add_run_arguments(parser: ArgumentParser) -> None:
    """Flags shared by every subcommand: data paths, output and hyper-parameters"""
    parser.add_argument("--config", type=Path, help="flat key = value configuration file")
    parser.add_argument("--dataset", choices=["book", "movie", "music", "custom"], help="preset block")
    parser.add_argument("--interactions", help="user item [rating] file")
    parser.add_argument("--kg", help="head relation tail file")
    parser.add_argument("--alignment", help="item entity file (identity when omitted)")
    parser.add_argument("--output", dest="output_dir", help="output directory")
    parser.add_argument("--rating-threshold", dest="rating_threshold", type=float)
    for flag, (field, kind) in HYPER_FLAGS.items():
        parser.add_argument(flag, dest=field, type=kind)
    for flag, (field, choices) in CHOICE_FLAGS.items():
        parser.add_argument(flag, dest=field, choices=choices)
    for flag, field in SWITCH_FLAGS.items():
        parser.add_argument(flag, dest=field, action="store_true", default=None)
    parser.add_argument("--frozen-graphs", dest="frozen_graphs", action="store_true", help="build graphs once")


def run_config(options: Dict[str, Any]) -> RunConfig:
    """Resolve the effective configuration for a command invocation"""
    overrides = {key: options.get(key) for key in RunConfig.model_fields if key in options}
    if options.get("frozen_graphs"):
        overrides["resample_graphs"] = False
    config_path = options.get("config")
    if config_path is not None and not Path(config_path).exists():
        raise ConfigError(f"--config: {config_path} does not exist")
    config = build_run_config(config_path, overrides)
    if config.output_dir is None:
        config = config.model_copy(update={"output_dir": str(Path(settings.output_root) / config.dataset)})
    return config


def cache_store(config: RunConfig) -> DataStore:
    return DataStore(Path(config.output_dir) / "cache")


def echo_config(config: RunConfig) -> Path:
    return write_effective_config(config, Path(config.output_dir))
