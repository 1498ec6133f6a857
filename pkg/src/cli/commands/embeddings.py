"""
embed and cluster subcommands.
"""

import csv
import logging

from src.cli.context import CommandContext, load_feature_map, out_dir, pick
from src.core.errors import ArtifactIOError
from src.services.corpus import Split, load_manifest, load_registry
from src.services.embeddings import build_store, kmeans, load_store, save_store
from src.services.model import load_checkpoint

logger = logging.getLogger(__name__)


def run_embed(args, ctx: CommandContext) -> int:
    params = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    split = Split(args.split) if args.split else None
    ids = [u.id for u in manifest.utterances(split)]
    features = load_feature_map(manifest, args.features, ids, ctx.settings.N_MELS)
    store = build_store(params, manifest, features, split=split, max_samples=args.max_samples)
    save_store(store, args.out)
    ctx.metrics.languages_embedded.set(len(store))
    return 0


def run_cluster(args, ctx: CommandContext) -> int:
    store = load_store(args.store)
    result = kmeans(
        store,
        k=pick(args.k, ctx.settings.KMEANS_K),
        seed=args.seed,
        max_iters=pick(args.max_iters, ctx.settings.KMEANS_MAX_ITERS),
    )
    registry = load_registry(args.registry) if args.registry else None
    target = out_dir(args.out) / "clusters.csv"
    try:
        with open(target, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["lang", "cluster", "lat", "lon"] if registry else ["lang", "cluster"])
            for iso, cluster in sorted(result.assignments.items()):
                row = [iso, cluster]
                if registry:
                    entry = registry.entry(iso)
                    row += [repr(entry.latitude), repr(entry.longitude)]
                writer.writerow(row)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {target}: {e}") from e
    ctx.metrics.kmeans_inertia.set(result.inertia)
    logger.info(f"Wrote {len(result.assignments)} cluster assignments to {target}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("embed", help="average encoder outputs into language embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="embedding store JSON path")
    p.add_argument("--split", choices=[s.value for s in Split], help="embed only this split")
    p.add_argument("--max-samples", type=int, help="per-language sample budget")
    p.set_defaults(handler=run_embed)

    p = subparsers.add_parser("cluster", help="k-means over language embeddings")
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, help="required")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--registry", help="add lat/lon columns for map plotting")
    p.add_argument("--out", required=True, help="directory for clusters.csv")
    p.set_defaults(handler=run_cluster)
