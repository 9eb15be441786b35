import os
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, Optional

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables from .env file
load_dotenv()

ENV_PREFIX = "ELASTIQ_"


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _env(name: str, default: Any, parse: Callable[[str], Any]) -> Any:
    """
    Reads one ELASTIQ_* variable from the environment.

    Args:
        name: Variable name without the prefix
        default: Value used when the variable is unset or empty
        parse: Converter applied to the raw string

    Returns:
        Parsed value
    """
    raw = os.getenv(ENV_PREFIX + name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return parse(raw)
    except ValueError as e:
        raise ConfigError(f"invalid value for {ENV_PREFIX}{name}: {raw!r} ({e})") from e


@dataclass(frozen=True)
class Settings:
    """Process-wide defaults, overridable through ELASTIQ_* environment variables."""

    seed: int = field(default_factory=lambda: _env("SEED", 0, int))
    steps: int = field(default_factory=lambda: _env("STEPS", 200, int))
    batch_size: int = field(default_factory=lambda: _env("BATCH_SIZE", 32, int))
    lr_adapter: float = field(default_factory=lambda: _env("LR_ADAPTER", 1e-3, float))
    lr_clip: float = field(default_factory=lambda: _env("LR_CLIP", 1e-4, float))
    percentile: float = field(default_factory=lambda: _env("PERCENTILE", 0.999, float))
    output_dir: str = field(default_factory=lambda: _env("OUTPUT_DIR", "runs", str))
    log_level: str = field(default_factory=lambda: _env("LOG_LEVEL", "INFO", str.upper))
    progress: bool = field(default_factory=lambda: _env("PROGRESS", True, _parse_bool))

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError(f"{ENV_PREFIX}STEPS must be positive, got {self.steps}")
        if self.batch_size <= 0:
            raise ConfigError(f"{ENV_PREFIX}BATCH_SIZE must be positive, got {self.batch_size}")
        if not 0.0 < self.percentile <= 1.0:
            raise ConfigError(f"{ENV_PREFIX}PERCENTILE must be in (0, 1], got {self.percentile}")
        if self.lr_adapter <= 0 or self.lr_clip <= 0:
            raise ConfigError("learning rates must be positive")

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_settings: Optional[Settings] = None


def get_settings(reload: bool = False) -> Settings:
    """Returns the cached Settings, re-reading the environment when asked."""
    global _settings
    if _settings is None or reload:
        _settings = Settings()
    return _settings
