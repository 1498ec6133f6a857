"""
distance, ensemble and rank subcommands.
"""

import logging

from src.cli.context import ANCHOR_FLAGS, CommandContext, parse_languages, parse_named_table
from src.core.errors import InsufficientDataError, UsageError
from src.services.corpus import (
    COSINE_TABLES,
    TABLE_NAMES,
    DistanceTable,
    TASK_POLARITY,
    Task,
    load_distance_table,
    load_pair_list,
    load_registry,
    load_score_table,
    load_tree,
)
from src.services.distances import (
    acoustic_table,
    all_pairs,
    ensemble,
    genetic_table,
    geodesic_table,
    rank_sources,
    save_table,
)
from src.services.embeddings import load_store
from src.services.evaluation import Anchor, best_measure, correlate
from src.services.model import load_checkpoint

logger = logging.getLogger(__name__)


def _require(args, flag: str, kind: str):
    value = getattr(args, flag)
    if value is None:
        raise UsageError(f"--kind {kind} needs --{flag.replace('_', '-')}")
    return value


def run_distance(args, ctx: CommandContext) -> int:
    languages = parse_languages(args.languages)
    kind = args.kind
    if kind in COSINE_TABLES:
        store = load_store(_require(args, "store", kind))
        expected = load_checkpoint(args.checkpoint).checksum() if args.checkpoint else None
        table = acoustic_table(store, languages, name=kind, expect_model_id=expected)
    elif kind == "genetic":
        table = genetic_table(load_tree(_require(args, "tree", kind)), languages)
    elif kind == "geodesic":
        table = geodesic_table(load_registry(_require(args, "registry", kind)), languages)
    else:
        loaded = load_distance_table(_require(args, "table", kind), kind)
        if languages is not None:
            wanted = all_pairs(languages)
            loaded = DistanceTable(
                name=kind,
                values={(a, b): 0.0 if a == b else loaded.get(a, b) for a, b in wanted},
                constituents=loaded.constituents,
            )
        table = loaded
    save_table(table, args.out)
    return 0


def _ensemble_pairs(args, tables: list[DistanceTable]) -> list[tuple[str, str]]:
    if args.pairs:
        return load_pair_list(args.pairs)
    if args.target:
        candidates = parse_languages(args.candidates) or sorted(tables[0].languages)
        return [(c, args.target) for c in candidates]
    shared = set(tables[0].unordered_pairs())
    for table in tables[1:]:
        shared &= set(table.unordered_pairs())
    return sorted(shared)


def _best_of(args, tables: list[DistanceTable]) -> list[DistanceTable]:
    """Best linguistic table plus best acoustic table by mean rho over all anchors."""
    if not args.scores or not args.task:
        raise UsageError("--best-of needs --scores and --task")
    scores = load_score_table(args.scores, args.task)
    anchor = ANCHOR_FLAGS[args.anchor]
    anchors = sorted(
        {source if anchor == Anchor.FIX_SOURCE else target for source, target in scores.values}
    )
    reports = []
    for table in tables:
        for lang in anchors:
            try:
                reports.append(correlate(table, scores, anchor, lang))
            except InsufficientDataError as e:
                logger.warning(f"Skipping {table.name} anchor {lang}: {e.message}")
    polarity = TASK_POLARITY[scores.task]
    acoustic = [t.name for t in tables if t.name in COSINE_TABLES]
    linguistic = [t.name for t in tables if t.name not in COSINE_TABLES]
    if not acoustic or not linguistic:
        raise UsageError("--best-of needs at least one acoustic and one linguistic table")
    chosen = [
        best_measure(reports, linguistic, polarity),
        best_measure(reports, acoustic, polarity),
    ]
    logger.info(f"Best measures: {chosen[0]} (linguistic), {chosen[1]} (acoustic)")
    by_name = {t.name: t for t in tables}
    return [by_name[name] for name in chosen]


def run_ensemble(args, ctx: CommandContext) -> int:
    tables = [parse_named_table(spec) for spec in args.table]
    names = [t.name for t in tables]
    if len(set(names)) != len(names):
        raise UsageError(f"table names must be distinct, got {', '.join(names)}")
    if args.best_of:
        tables = _best_of(args, tables)
    table = ensemble(tables, _ensemble_pairs(args, tables))
    save_table(table, args.out)
    return 0


def run_rank(args, ctx: CommandContext) -> int:
    table = parse_named_table(args.table)
    candidates = parse_languages(args.candidates) or sorted(table.languages)
    for language, distance in rank_sources(table, args.target, candidates):
        print(f"{language},{distance!r}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("distance", help="compute or validate a pairwise distance table")
    p.add_argument("--kind", required=True, choices=[n for n in TABLE_NAMES if n != "ensemble"])
    p.add_argument("--store", help="embedding store (speech-ce, speech-sc, multimodal)")
    p.add_argument("--checkpoint", help="reject a store built by a different model")
    p.add_argument("--tree", help="family tree JSON (genetic)")
    p.add_argument("--registry", help="language registry CSV (geodesic)")
    p.add_argument("--table", help="precomputed table CSV (typological kinds)")
    p.add_argument("--languages", help="comma-separated ISO codes (default: all)")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(handler=run_distance)

    p = subparsers.add_parser("ensemble", help="average min-max rescaled tables")
    p.add_argument("--table", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--pairs", help="CSV lang_a,lang_b restricting the rescale domain")
    p.add_argument("--target", help="use (candidate, target) pairs")
    p.add_argument("--candidates", help="comma-separated ISO codes")
    p.add_argument(
        "--best-of", action="store_true", help="combine the best linguistic and acoustic table"
    )
    p.add_argument("--scores", help="score CSV for --best-of")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--anchor", choices=sorted(ANCHOR_FLAGS), default="target")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=run_ensemble)

    p = subparsers.add_parser("rank", help="rank candidate source languages for a target")
    p.add_argument("--table", required=True, metavar="NAME=PATH")
    p.add_argument("--target", required=True)
    p.add_argument("--candidates", help="comma-separated ISO codes (default: all in table)")
    p.set_defaults(handler=run_rank)
