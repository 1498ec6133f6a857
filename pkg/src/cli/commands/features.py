"""
featurize and split subcommands.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from src.cli.context import CommandContext, mel_config, out_dir, pick, resolve_audio
from src.services.corpus import (
    CorpusManifest,
    load_manifest,
    fill_sample_counts,
    read_wav,
    save_manifest,
    split_languages,
)
from src.services.features import MelConfig, feature_path, mel_spectrogram, save_features

logger = logging.getLogger(__name__)


def _featurize_one(job: tuple[str, str, str, dict]) -> str:
    utt_id, audio, target_dir, config_values = job
    samples, _ = read_wav(audio)
    spec = mel_spectrogram(samples, MelConfig(**config_values), source_id=utt_id)
    save_features(spec, feature_path(target_dir, utt_id))
    return utt_id


def run_featurize(args, ctx: CommandContext) -> int:
    manifest = load_manifest(args.manifest)
    target = out_dir(args.out)
    config = mel_config(ctx.settings).model_dump()
    jobs = [
        (utt.id, str(resolve_audio(args.manifest, utt.audio_path)), str(target), config)
        for utt in manifest.records
    ]
    workers = pick(args.workers, ctx.settings.WORKERS) or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_featurize_one, jobs, chunksize=8))
    else:
        done = [_featurize_one(job) for job in jobs]
    ctx.metrics.utterances_featurized.set(len(done))
    logger.info(f"Featurized {len(done)} utterances into {target}")
    return 0


def run_split(args, ctx: CommandContext) -> int:
    manifest = load_manifest(args.manifest)
    result = split_languages(manifest, tuple(args.fractions), seed=args.seed)
    result = fill_sample_counts(result, base_dir=Path(args.manifest).parent)
    # audio paths stay valid relative to the new manifest's directory
    out_parent = os.path.abspath(args.out.parent)
    records = tuple(
        u.model_copy(
            update={
                "audio_path": os.path.relpath(
                    resolve_audio(args.manifest, u.audio_path), out_parent
                )
            }
        )
        for u in result.records
    )
    save_manifest(CorpusManifest(records, result.splits, result.zero_shot), args.out)
    logger.info(f"Wrote zero-shot manifest to {args.out}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("featurize", help="compute Mel spectrograms for a manifest")
    p.add_argument("--manifest", required=True, help="JSONL corpus manifest")
    p.add_argument("--out", required=True, help="directory for <id>.mel feature files")
    p.add_argument("--workers", type=int, help="worker processes (default: settings or cores)")
    p.set_defaults(handler=run_featurize)

    p = subparsers.add_parser("split", help="reassign splits by language for zero-shot evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, type=Path, help="output manifest path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--fractions",
        type=float,
        nargs=3,
        default=(0.8, 0.1, 0.1),
        metavar=("TRAIN", "VAL", "TEST"),
    )
    p.set_defaults(handler=run_split)
