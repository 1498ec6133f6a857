"""
Configuration management for langsim.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from src.core.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "config/langsim.yaml"


class Settings(BaseSettings):
    """Run settings. Read from YAML only; the environment is not consulted."""

    model_config = SettingsConfigDict(case_sensitive=True, extra="forbid")

    # Service Configuration
    SERVICE_NAME: str = "langsim"
    VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"
    METRICS_FILE: str | None = None

    # Feature extraction (16 kHz, 80-channel Mel)
    SAMPLE_RATE: int = 16000
    N_FFT: int = 800
    HOP_LENGTH: int = 200
    WIN_LENGTH: int = 800
    N_MELS: int = 80

    # SpecAugment default policy
    FREQ_MASKS: int = 2
    FREQ_WIDTH_MAX: int = 10
    TIME_MASKS: int = 2
    TIME_WIDTH_MAX: int = 20

    # Encoder (desk scale)
    CONV_CHANNELS: list[int] = [8, 16, 32]
    EMBED_DIM: int = 64
    PROJ_DIM: int = 32
    CHAR_DIM: int = 16
    TEXT_HIDDEN: int = 32
    TEXT_ENCODER: str = "conv"

    # Training
    LEARNING_RATE: float = 1e-3
    BATCH_SIZE: int = 128
    EPOCHS: int = 20
    ALPHA: float = 3e-2
    TAU: float = 0.1

    # Clustering
    KMEANS_K: int = 5
    KMEANS_MAX_ITERS: int = 100

    # Parallelism (None = number of cores)
    WORKERS: int | None = None

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)


def _read_yaml(config_file: Path) -> dict[str, Any]:
    if not config_file.exists():
        logger.warning(f"Config not found: {config_file}, using defaults")
        return {}
    try:
        with open(config_file) as f:
            values = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {config_file}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{config_file} must contain a mapping at top level")
    return values


@lru_cache()
def get_settings(config_file: str = DEFAULT_CONFIG_FILE) -> Settings:
    """Get cached settings instance for a config file."""
    values = _read_yaml(Path(config_file))
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid settings in {config_file}: {e.errors()[0]['msg']}") from e
