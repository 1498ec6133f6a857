"""
correlate and family-eval subcommands.
"""

import json
import logging
import sys

from src.cli.context import (
    ANCHOR_FLAGS,
    CommandContext,
    load_feature_map,
    out_dir,
    parse_named_table,
)
from src.core.errors import ArtifactIOError, InsufficientDataError, UsageError
from src.services.corpus import Split, Task, load_manifest, load_registry, load_score_table
from src.services.evaluation import (
    Anchor,
    correlate,
    emit_report,
    eval_family_classification,
    render_report_csv,
    summarize,
)
from src.services.distances import rank_sources
from src.services.model import load_checkpoint

logger = logging.getLogger(__name__)


def run_correlate(args, ctx: CommandContext) -> int:
    tables = [parse_named_table(spec) for spec in args.table]
    scores = load_score_table(args.scores, args.task)
    anchor = ANCHOR_FLAGS[args.anchor]
    explicit = bool(args.anchor_lang)
    if explicit:
        anchors = sorted(set(args.anchor_lang))
    else:
        anchors = sorted(
            {source if anchor == Anchor.FIX_SOURCE else target for source, target in scores.values}
        )

    reports = []
    rankings: dict[str, list[tuple[str, float]]] = {}
    for table in tables:
        for lang in anchors:
            try:
                report = correlate(table, scores, anchor, lang)
            except InsufficientDataError as e:
                if explicit:
                    raise
                logger.warning(f"Skipping {table.name} anchor {lang}: {e.message}")
                continue
            reports.append(report)
            rankings[f"{table.name}/{lang}"] = rank_sources(
                table, lang, [pair.language for pair in report.pairs]
            )
            ctx.metrics.spearman_rho.labels(measure=table.name, anchor_lang=lang).set(report.rho)
    if not reports:
        raise InsufficientDataError("no anchor language has at least 2 overlapping pairs")

    sys.stdout.write(render_report_csv(reports))
    for measure, mean in summarize(reports).items():
        logger.info(f"Mean rho for {measure}: {mean:.4f}")
    if args.out:
        emit_report(reports, out_dir(args.out), rankings)
    return 0


def run_family_eval(args, ctx: CommandContext) -> int:
    params = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, zero_shot=True)
    registry = load_registry(args.registry)
    ids = [u.id for split in (Split.VAL, Split.TEST) for u in manifest.utterances(split)]
    if not ids:
        raise UsageError("manifest has no val or test utterances to evaluate")
    features = load_feature_map(manifest, args.features, ids, ctx.settings.N_MELS)
    train_languages = sorted(manifest.languages(Split.TRAIN)) or None
    result = eval_family_classification(params, manifest, features, registry, train_languages)

    for split, accuracy in result.accuracy.items():
        print(f"{split},{accuracy!r}")
        ctx.metrics.family_accuracy.labels(split=split).set(accuracy)
    if args.out:
        target = out_dir(args.out) / "family_eval.json"
        try:
            target.write_text(
                json.dumps(result.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
        except OSError as e:
            raise ArtifactIOError(f"cannot write {target}: {e}") from e
        logger.info(f"Wrote family evaluation to {target}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("correlate", help="Spearman rho between distances and scores")
    p.add_argument("--table", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--scores", required=True, help="score CSV source,target,score")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--anchor", required=True, choices=sorted(ANCHOR_FLAGS))
    p.add_argument(
        "--anchor-lang",
        action="append",
        help="anchor language, repeatable (default: every anchor in the scores)",
    )
    p.add_argument("--out", help="directory for report.csv and report.json")
    p.set_defaults(handler=run_correlate)

    p = subparsers.add_parser("family-eval", help="zero-shot language family classification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="zero-shot manifest")
    p.add_argument("--features", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--out", help="directory for family_eval.json")
    p.set_defaults(handler=run_family_eval)
