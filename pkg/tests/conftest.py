"""Pytest configuration and fixtures."""
import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the repo root to path so `src` imports resolve
root_path = Path(__file__).parent.parent
if str(root_path) not in sys.path:
    sys.path.insert(0, str(root_path))

from src.services.corpus import CorpusManifest, Split, Utterance, write_wav  # noqa: E402
from src.services.features import mel_spectrogram  # noqa: E402
from src.services.model import (  # noqa: E402
    ConvBlock,
    EncoderConfig,
    Loss,
    TrainConfig,
    train,
)

FIXTURES = Path(__file__).parent / "fixtures"
RATE = 16000

# One tone per language, one per quarter of the Mel axis
TONES = {"aaa": 286.0, "bbb": 1137.0, "ccc": 2721.0, "ddd": 5670.0}


def tone_bursts(freq: float, rng: np.random.Generator, seconds: float = 0.5) -> np.ndarray:
    """Low noise with two short bursts of a pure tone."""
    n = int(seconds * RATE)
    t = np.arange(n) / RATE
    samples = 0.01 * rng.standard_normal(n)
    for _ in range(2):
        length = int(rng.integers(800, 1400))
        start = int(rng.integers(0, n - length))
        phase = rng.uniform(0, 2 * np.pi)
        samples[start : start + length] += 0.5 * np.sin(
            2 * np.pi * freq * t[start : start + length] + phase
        )
    return np.clip(samples, -1.0, 1.0)


def _plan(languages, per_split, seed):
    rng = np.random.default_rng(seed)
    for language in languages:
        freq = TONES[languages[language]]
        for split, count in per_split.items():
            for i in range(count):
                yield f"{language}_{split.value}_{i:03d}", language, split, tone_bursts(freq, rng)


@pytest.fixture
def tone_features():
    """
    Build an in-memory corpus.

    `languages` maps ISO code to the code whose tone it borrows (or itself),
    `per_split` maps Split to utterances per language.
    """

    def build(languages, per_split, seed=0, text=False, zero_shot=False):
        if not isinstance(languages, dict):
            languages = {lang: lang for lang in languages}
        records, splits, features = [], [], {}
        for utt_id, language, split, samples in _plan(languages, per_split, seed):
            records.append(
                Utterance(
                    id=utt_id,
                    language=language,
                    audio_path=f"{utt_id}.wav",
                    text=f"{language} says {utt_id[-3:]}" if text else None,
                )
            )
            splits.append(split)
            features[utt_id] = mel_spectrogram(samples, source_id=utt_id)
        manifest = CorpusManifest(tuple(records), tuple(splits), zero_shot=zero_shot)
        return manifest, features

    return build


@pytest.fixture
def tone_corpus(tmp_path):
    """Write a WAV corpus plus a JSONL manifest with audio paths relative to it."""

    def build(languages, per_split, seed=0):
        if not isinstance(languages, dict):
            languages = {lang: lang for lang in languages}
        corpus = tmp_path / "corpus"
        lines = []
        for utt_id, language, split, samples in _plan(languages, per_split, seed):
            write_wav(corpus / "audio" / f"{utt_id}.wav", samples)
            row = {"id": utt_id, "lang": language, "audio": f"audio/{utt_id}.wav"}
            row["split"] = split.value
            lines.append(json.dumps(row))
        manifest = corpus / "manifest.jsonl"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return manifest

    return build


@pytest.fixture
def tiny_encoder():
    """Small enough for central-difference gradient checks."""
    return EncoderConfig(
        conv_blocks=(ConvBlock(out_channels=2), ConvBlock(out_channels=2)),
        embed_dim=4,
        pool=(2, 2),
        proj_dim=3,
        char_dim=3,
        text_hidden=4,
    )


def _small_encoder() -> EncoderConfig:
    return EncoderConfig(
        conv_blocks=tuple(ConvBlock(out_channels=c) for c in (4, 8, 16)),
        embed_dim=16,
        proj_dim=8,
        char_dim=4,
        text_hidden=8,
    )


@pytest.fixture
def small_encoder():
    return _small_encoder()


@pytest.fixture
def settings_file(tmp_path):
    """Settings YAML with a small encoder and single-process featurization."""
    path = tmp_path / "langsim.yaml"
    path.write_text(
        "CONV_CHANNELS: [4, 8]\n"
        "EMBED_DIM: 8\n"
        "PROJ_DIM: 4\n"
        "CHAR_DIM: 4\n"
        "TEXT_HIDDEN: 4\n"
        "BATCH_SIZE: 8\n"
        "WORKERS: 1\n",
        encoding="utf-8",
    )
    return path


@pytest.fixture
def indic_tts_dir():
    return FIXTURES / "indic_tts"


@pytest.fixture(scope="session")
def trained_ce():
    """CE model trained once on four tone languages, with held-out utterances."""
    languages = {lang: lang for lang in TONES}
    per_split = {Split.TRAIN: 40, Split.TEST: 10}
    records, splits, features = [], [], {}
    for utt_id, language, split, samples in _plan(languages, per_split, seed=7):
        records.append(Utterance(id=utt_id, language=language, audio_path=f"{utt_id}.wav"))
        splits.append(split)
        features[utt_id] = mel_spectrogram(samples, source_id=utt_id)
    manifest = CorpusManifest(tuple(records), tuple(splits))
    encoder = _small_encoder()
    config = TrainConfig(loss=Loss.CE, lr=1e-2, batch_size=16, epochs=20, seed=0)
    params = train(manifest, features, config, encoder)
    return params, manifest, features

