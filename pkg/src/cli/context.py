"""
Shared plumbing for subcommands: the run context, config building and
artifact loading helpers.
"""

import logging
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from src.core.config import Settings
from src.core.errors import ArtifactIOError, DataValidationError, UsageError
from src.core.metrics import RunMetrics
from src.services.corpus import TABLE_NAMES, CorpusManifest, DistanceTable, load_distance_table
from src.services.evaluation import Anchor
from src.services.features import (
    N_MELS,
    AugmentPolicy,
    MelConfig,
    MelSpectrogram,
    feature_path,
    load_features,
)

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

SEEDED_COMMANDS = frozenset({"train", "cluster"})

# --anchor values on the command line
ANCHOR_FLAGS = {"source": Anchor.FIX_SOURCE, "target": Anchor.FIX_TARGET}


class RunConfig(BaseModel):
    """What one invocation was asked to do, after flag parsing."""

    model_config = ConfigDict(frozen=True)

    command: str
    seed: int | None = None
    out: Path | None = None
    overrides: dict[str, float] = {}

    @field_validator("seed")
    @classmethod
    def _non_negative(cls, value: int | None) -> int | None:
        if value is not None and value < 0:
            raise ValueError("seed must be >= 0")
        return value

    def check(self) -> "RunConfig":
        if self.command in SEEDED_COMMANDS and self.seed is None:
            raise UsageError(f"{self.command} requires --seed")
        return self


@dataclass
class CommandContext:
    settings: Settings
    metrics: RunMetrics
    run: RunConfig


def validated(model: type[ModelT], **values: Any) -> ModelT:
    """Build a pydantic config, reporting violations as validation errors."""
    try:
        return model(**values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise DataValidationError(f"invalid {model.__name__}: {where}: {first['msg']}") from e


def pick(flag: Any, default: Any) -> Any:
    return default if flag is None else flag


def mel_config(settings: Settings) -> MelConfig:
    return validated(
        MelConfig,
        n_fft=settings.N_FFT,
        hop=settings.HOP_LENGTH,
        win=settings.WIN_LENGTH,
        n_mels=settings.N_MELS,
        rate=settings.SAMPLE_RATE,
    )


def augment_policy(settings: Settings, seed: int = 0) -> AugmentPolicy:
    return validated(
        AugmentPolicy,
        freq_masks=settings.FREQ_MASKS,
        freq_width_max=settings.FREQ_WIDTH_MAX,
        time_masks=settings.TIME_MASKS,
        time_width_max=settings.TIME_WIDTH_MAX,
        seed=seed,
    )


def resolve_audio(manifest_path: str | Path, audio: str) -> Path:
    """Relative audio paths are taken relative to the manifest's directory."""
    path = Path(audio)
    return path if path.is_absolute() else Path(manifest_path).parent / path


def load_feature_map(
    manifest: CorpusManifest,
    features_dir: str | Path,
    ids: Iterable[str] | None = None,
    n_mels: int = N_MELS,
) -> dict[str, MelSpectrogram]:
    wanted = [u.id for u in manifest.records] if ids is None else list(ids)
    features: dict[str, MelSpectrogram] = {}
    for utt_id in wanted:
        path = feature_path(features_dir, utt_id)
        if not path.exists():
            raise DataValidationError(f"utterance {utt_id} is not featurized ({path} missing)")
        features[utt_id] = load_features(path, source_id=utt_id, n_mels=n_mels)
    logger.info(f"Loaded {len(features)} feature files from {features_dir}")
    return features


def parse_named_table(spec: str) -> DistanceTable:
    """Load NAME=PATH."""
    name, sep, path = spec.partition("=")
    if not sep or not path:
        raise UsageError(f"expected NAME=PATH, got {spec!r}")
    if name not in TABLE_NAMES:
        raise UsageError(f"unknown table name {name!r}; choose from {', '.join(TABLE_NAMES)}")
    return load_distance_table(path, name)


def parse_languages(raw: str | None) -> list[str] | None:
    if raw is None:
        return None
    languages = [part.strip() for part in raw.split(",") if part.strip()]
    if not languages:
        raise UsageError("language list is empty")
    return languages


def out_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"cannot create output directory {path}: {e}") from e
    return path
