from pydantic import ValidationError
from dotenv.parser import parse_stream
from pydantic_settings import BaseSettings, SettingsConfigDict
from pathlib import Path
from typing import Any, Dict, Optional
import io
import logging

from app.errors import ConfigError
from app.models import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Paths
    data_dir: str = "."
    output_root: str = "runs"

    # Logging
    log_level: str = "INFO"
    log_format: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Environment
    environment: str = "development"

    model_config = SettingsConfigDict(
        env_prefix="KGIC_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )


# Global settings instance
settings = Settings()


# Per-dataset default blocks, depth tuned per dataset
_SHARED = {
    "d": 64,
    "batch_size": 2048,
    "local_size": 40,
    "nonlocal_size": 128,
    "eta": 4e-3,
    "alpha": 1.0,
    "tau": 0.1,
    "J": 1,
}

DATASET_PRESETS: Dict[str, Dict[str, Any]] = {
    "book": {**_SHARED, "L": 1, "lambda1": 1e-6, "lambda2": 1e-4, "rating_threshold": None},
    "movie": {**_SHARED, "L": 2, "lambda1": 1e-7, "lambda2": 1e-5, "rating_threshold": 4.0},
    "music": {**_SHARED, "L": 2, "lambda1": 1e-6, "lambda2": 1e-4, "rating_threshold": None},
    "custom": {},
}


def resolve_data_path(path: Optional[str], data_dir: Optional[str] = None) -> Optional[Path]:
    """Resolve a dataset path against KGIC_DATA_DIR unless it is absolute"""
    if path is None:
        return None
    candidate = Path(path).expanduser()
    if candidate.is_absolute():
        return candidate
    return Path(data_dir or settings.data_dir) / candidate


def parse_flat_config(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse `key = value` lines with `#` comments into a flat dict"""
    values: Dict[str, str] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            raise ConfigError(f"{source}:{line}: cannot parse {binding.original.string.strip()!r}")
        if binding.key is None:
            continue
        if binding.value is None:
            raise ConfigError(f"{source}:{line}: `{binding.key}` has no value")
        values[binding.key] = binding.value

    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {', '.join(unknown)}")
    return values


def read_config_file(path: Path) -> Dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_flat_config(text, source=str(path))


def build_run_config(
    config_path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Merge preset < config file < overrides into a validated RunConfig"""
    file_values = read_config_file(config_path) if config_path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    dataset = overrides.get("dataset") or file_values.get("dataset") or "custom"
    if dataset not in DATASET_PRESETS:
        raise ConfigError(f"unknown dataset preset '{dataset}'")

    merged = {**DATASET_PRESETS[dataset], **file_values, **overrides, "dataset": dataset}
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def render_config(config: RunConfig) -> str:
    lines = ["# effective configuration"]
    for key in RunConfig.model_fields:
        lines.append(f"{key} = {_format_value(getattr(config, key))}")
    return "\n".join(lines) + "\n"


def write_effective_config(config: RunConfig, output_dir: Path) -> Path:
    """Echo the merged configuration next to the run's outputs"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "effective.cfg"
    path.write_text(render_config(config), encoding="utf-8")
    logger.info(f"Effective configuration written to {path}")
    return path
