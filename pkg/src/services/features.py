"""
Feature Service
Normalized Mel spectrograms, SpecAugment masking, Mel-cepstral distortion
and the binary feature cache.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import ArtifactIOError, DataValidationError, ParseError, TooShortError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
ZERO_VARIANCE = 1e-8
MCD_SCALE = 10.0 / math.log(10.0)
MCD_GOOD_THRESHOLD = 5.5
N_MELS = 80

CACHE_MAGIC = 0x4D454C46  # "MELF"
CACHE_VERSION = 1


class MelConfig(BaseModel):
    """STFT and filterbank parameters (16 kHz, 80 channels)."""

    model_config = ConfigDict(frozen=True)

    n_fft: int = Field(default=800, gt=0)
    hop: int = Field(default=200, gt=0)
    win: int = Field(default=800, gt=0)
    n_mels: int = Field(default=N_MELS, gt=0)
    rate: int = Field(default=16000, gt=0)


class AugmentPolicy(BaseModel):
    """SpecAugment masks; widths are drawn uniformly from [0, width_max]."""

    model_config = ConfigDict(frozen=True)

    freq_masks: int = Field(default=2, ge=0)
    freq_width_max: int = Field(default=10, ge=0)
    time_masks: int = Field(default=2, ge=0)
    time_width_max: int = Field(default=20, ge=0)
    seed: int = 0
    fixed_widths: bool = False


@dataclass(frozen=True)
class MelSpectrogram:
    """[channels x frames] feature matrix."""

    data: np.ndarray
    frame_hop: int = 200
    source_id: str = ""
    n_mels: int = N_MELS

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 2 or data.shape[1] < 1:
            raise DataValidationError(
                f"spectrogram {self.source_id!r} must be [channels x frames], got {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise DataValidationError(f"spectrogram {self.source_id!r} has non-finite values")
        if data.shape[0] != self.n_mels:
            raise DataValidationError(
                f"spectrogram {self.source_id!r} has {data.shape[0]} channels, "
                f"expected {self.n_mels}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]


@lru_cache(maxsize=8)
def mel_filterbank(config: MelConfig) -> np.ndarray:
    """HTK-scale triangular filters spanning 0 Hz to Nyquist, peak height 1."""
    return librosa.filters.mel(
        sr=config.rate,
        n_fft=config.n_fft,
        n_mels=config.n_mels,
        fmin=0.0,
        fmax=config.rate / 2.0,
        htk=True,
        norm=None,
    )


def mel_band_edges(config: MelConfig = MelConfig()) -> np.ndarray:
    """n_mels + 2 frequencies; filter m spans edges[m] to edges[m+2], peaking at edges[m+1]."""
    return librosa.mel_frequencies(
        n_mels=config.n_mels + 2, fmin=0.0, fmax=config.rate / 2.0, htk=True
    )


def _validate_samples(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise DataValidationError(f"expected mono samples, got shape {samples.shape}")
    if np.isnan(samples).any():
        raise DataValidationError("samples contain NaN")
    if len(samples) < config.win:
        raise TooShortError(f"{len(samples)} samples is shorter than one window ({config.win})")
    return samples


def log_mel(samples: np.ndarray, config: MelConfig = MelConfig()) -> np.ndarray:
    """Log Mel energies before normalization, [n_mels x frames]."""
    samples = _validate_samples(samples, config)
    stft = librosa.stft(
        samples,
        n_fft=config.n_fft,
        hop_length=config.hop,
        win_length=config.win,
        window="hann",
        center=False,
    )
    mel = mel_filterbank(config) @ np.abs(stft)
    return np.log(mel + LOG_FLOOR)


def normalize_channels(features: np.ndarray) -> np.ndarray:
    """Per-channel z-normalization; zero-variance channels become 0."""
    mean = features.mean(axis=1, keepdims=True)
    std = features.std(axis=1, keepdims=True)
    flat = std < ZERO_VARIANCE
    out = (features - mean) / np.where(flat, 1.0, std)
    out[np.broadcast_to(flat, out.shape)] = 0.0
    return out


def mel_spectrogram(
    samples: np.ndarray, config: MelConfig = MelConfig(), source_id: str = ""
) -> MelSpectrogram:
    """80-channel normalized Mel spectrogram; frames = 1 + (len - win) // hop."""
    data = normalize_channels(log_mel(samples, config))
    return MelSpectrogram(
        data=data, frame_hop=config.hop, source_id=source_id, n_mels=config.n_mels
    )


def spec_augment(spec: MelSpectrogram, policy: AugmentPolicy) -> MelSpectrogram:
    """Zero contiguous channel bands and frame spans. The input is not modified."""
    channels, frames = spec.data.shape
    if policy.freq_width_max > channels:
        raise DataValidationError(
            f"freq_width_max {policy.freq_width_max} exceeds {channels} channels"
        )
    if policy.time_width_max > frames:
        raise DataValidationError(f"time_width_max {policy.time_width_max} exceeds {frames} frames")

    rng = np.random.default_rng(policy.seed)
    data = spec.data.copy()

    def draw(width_max: int, axis_len: int) -> tuple[int, int]:
        width = width_max if policy.fixed_widths else int(rng.integers(0, width_max + 1))
        start = int(rng.integers(0, axis_len - width + 1))
        return start, width

    for _ in range(policy.freq_masks):
        start, width = draw(policy.freq_width_max, channels)
        data[start : start + width, :] = 0.0
    for _ in range(policy.time_masks):
        start, width = draw(policy.time_width_max, frames)
        data[:, start : start + width] = 0.0
    return MelSpectrogram(
        data=data, frame_hop=spec.frame_hop, source_id=spec.source_id, n_mels=spec.n_mels
    )


def mcd(cepstra_a: np.ndarray, cepstra_b: np.ndarray, exclude_c0: bool = True) -> float:
    """Frame-mean Mel-cepstral distortion in dB for frame-aligned [frames x D] cepstra."""
    a = np.asarray(cepstra_a, dtype=np.float64)
    b = np.asarray(cepstra_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DataValidationError(f"cepstra shapes differ or are not 2-D: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise DataValidationError("cepstra have zero frames")
    if exclude_c0:
        a, b = a[:, 1:], b[:, 1:]
    per_frame = MCD_SCALE * np.sqrt(2.0 * np.sum((a - b) ** 2, axis=1))
    return float(per_frame.mean())


def quality_gate(
    mcd_by_language: Mapping[str, float], threshold: float = MCD_GOOD_THRESHOLD
) -> list[str]:
    """Languages whose dataset MCD is below the threshold, sorted."""
    return sorted(lang for lang, value in mcd_by_language.items() if value < threshold)


# --------------------------------------------------------------------------
# Feature cache
# --------------------------------------------------------------------------


def save_features(spec: MelSpectrogram, path: str | Path) -> None:
    """Header of four little-endian int32 (magic, version, channels, frames), then float32 rows."""
    header = np.array([CACHE_MAGIC, CACHE_VERSION, spec.channels, spec.frames], dtype="<i4")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header.tobytes())
            f.write(np.ascontiguousarray(spec.data, dtype="<f4").tobytes())
    except OSError as e:
        raise ArtifactIOError(f"cannot write feature cache {path}: {e}") from e


def load_features(
    path: str | Path, source_id: str | None = None, n_mels: int = N_MELS
) -> MelSpectrogram:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"cannot read feature cache {path}: {e}") from e
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated feature header")
    magic, version, channels, frames = np.frombuffer(raw[:16], dtype="<i4")
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ParseError(f"{path}: not a version {CACHE_VERSION} feature cache")
    expected = 16 + 4 * int(channels) * int(frames)
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(int(channels), int(frames))
    return MelSpectrogram(
        data=data.astype(np.float32),
        source_id=source_id if source_id is not None else path.stem,
        n_mels=n_mels,
    )


def feature_path(features_dir: str | Path, utterance_id: str) -> Path:
    return Path(features_dir) / f"{utterance_id}.mel"
