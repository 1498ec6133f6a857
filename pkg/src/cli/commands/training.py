"""
train subcommand.
"""

import argparse
import csv
import logging

from src.cli.context import (
    CommandContext,
    augment_policy,
    load_feature_map,
    out_dir,
    pick,
    validated,
)
from src.core.config import Settings
from src.core.errors import ArtifactIOError
from src.services.corpus import Split, load_manifest
from src.services.model import (
    ConvBlock,
    EncoderConfig,
    Loss,
    TrainConfig,
    classify,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

LOSS_FLAGS = {"ce": Loss.CE, "supcon": Loss.SUPCON, "multimodal": Loss.MULTIMODAL}


def encoder_config(settings: Settings, text_encoder: str | None = None) -> EncoderConfig:
    return validated(
        EncoderConfig,
        conv_blocks=tuple(ConvBlock(out_channels=c) for c in settings.CONV_CHANNELS),
        embed_dim=settings.EMBED_DIM,
        proj_dim=settings.PROJ_DIM,
        char_dim=settings.CHAR_DIM,
        text_hidden=settings.TEXT_HIDDEN,
        text_encoder=pick(text_encoder, settings.TEXT_ENCODER),
    )


def train_config(args, settings: Settings) -> TrainConfig:
    return validated(
        TrainConfig,
        loss=LOSS_FLAGS[args.loss],
        lr=pick(args.lr, settings.LEARNING_RATE),
        batch_size=pick(args.batch, settings.BATCH_SIZE),
        epochs=pick(args.epochs, settings.EPOCHS),
        alpha=pick(args.alpha, settings.ALPHA),
        tau=pick(args.tau, settings.TAU),
        seed=args.seed,
        augment=args.augment,
        augment_policy=augment_policy(settings),
    )


def run_train(args, ctx: CommandContext) -> int:
    manifest = load_manifest(args.manifest)
    config = train_config(args, ctx.settings)
    encoder = encoder_config(ctx.settings, args.text_encoder)
    train_ids = [u.id for u in manifest.utterances(Split.TRAIN)]
    features = load_feature_map(manifest, args.features, train_ids, ctx.settings.N_MELS)

    params = train(manifest, features, config, encoder, metrics=ctx.metrics)

    target = out_dir(args.out)
    save_checkpoint(params, target / "model.ckpt")
    try:
        with open(target / "loss_trace.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["epoch", "loss"])
            for epoch, loss in enumerate(params.loss_trace, start=1):
                writer.writerow([epoch, repr(loss)])
    except OSError as e:
        raise ArtifactIOError(f"cannot write loss trace: {e}") from e

    if config.loss != Loss.SUPCON and config.epochs > 0:
        label_of = {lang: i for i, lang in enumerate(params.languages)}
        utterances = manifest.utterances(Split.TRAIN)
        correct = sum(
            classify(params, features[u.id])[0] == label_of[u.language] for u in utterances
        )
        accuracy = correct / len(utterances)
        ctx.metrics.train_accuracy.set(accuracy)
        logger.info(f"Training-split accuracy {accuracy:.4f}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("train", help="train the speech encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, help="directory of <id>.mel files")
    p.add_argument("--loss", required=True, choices=sorted(LOSS_FLAGS))
    p.add_argument("--out", required=True, help="directory for model.ckpt and loss_trace.csv")
    p.add_argument("--seed", type=int, help="required; drives init, shuffling and augmentation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--alpha", type=float, help="multimodal alignment weight")
    p.add_argument("--tau", type=float, help="SupCon temperature")
    p.add_argument(
        "--augment",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="SpecAugment training inputs (default: on for SupCon only)",
    )
    p.add_argument("--text-encoder", choices=["conv", "rnn"])
    p.set_defaults(handler=run_train)
