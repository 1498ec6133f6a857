"""
Evaluation Service
Rank correlation of distance measures against downstream scores, zero-shot
language family classification, character error rate and report files.
"""

import csv
import io
import json
import logging
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from enum import Enum
from pathlib import Path

import Levenshtein
import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import rankdata

from src.core.errors import (
    ArtifactIOError,
    DataValidationError,
    InsufficientDataError,
    UndefinedCorrelationError,
)
from src.services.corpus import (
    CorpusManifest,
    DistanceTable,
    LanguageRegistry,
    Polarity,
    ScoreTable,
    Split,
    Task,
)
from src.services.features import MelSpectrogram
from src.services.model import ModelParams, classify

logger = logging.getLogger(__name__)

REPORT_HEADER = ("measure", "anchor", "anchor_lang", "n", "rho")


class Anchor(str, Enum):
    FIX_SOURCE = "fix_source"
    FIX_TARGET = "fix_target"


class PairRank(BaseModel):
    language: str
    distance: float
    score: float
    distance_rank: float
    score_rank: float


class CorrelationReport(BaseModel):
    measure: str
    task: Task
    anchor: Anchor
    anchor_lang: str
    n: int = Field(ge=2)
    rho: float = Field(ge=-1.0, le=1.0)
    pairs: list[PairRank]
    note: str


class FamilyEvalResult(BaseModel):
    accuracy: dict[str, float]
    evaluated: dict[str, int]
    confusion: dict[str, dict[str, int]]
    n_families: int


# --------------------------------------------------------------------------
# Rank correlation
# --------------------------------------------------------------------------


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks (ties share the mean rank)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataValidationError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise InsufficientDataError(f"spearman needs at least 2 values, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataValidationError("spearman inputs must be finite")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("one side has zero rank variance (all values tied)")
    rho = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, rho))


def _interpretation(task: Task, polarity: Polarity) -> str:
    if polarity == Polarity.LOWER_IS_BETTER:
        return (
            f"rho is distance vs raw {task.value}; lower {task.value} is better, "
            f"so a more positive rho means a better measure"
        )
    return (
        f"rho is distance vs raw {task.value}; higher {task.value} is better, "
        f"so a more negative rho means a better measure"
    )


def correlate(
    table: DistanceTable,
    scores: ScoreTable,
    anchor: Anchor | str,
    anchor_lang: str,
    measure: str | None = None,
) -> CorrelationReport:
    """
    Spearman rho between distances and scores over the pairs sharing the
    anchor language. Self pairs are included; no polarity flipping.
    """
    anchor = Anchor(anchor)
    distances: list[float] = []
    values: list[float] = []
    languages: list[str] = []
    for (source, target), score in sorted(scores.values.items()):
        if anchor == Anchor.FIX_SOURCE and source != anchor_lang:
            continue
        if anchor == Anchor.FIX_TARGET and target != anchor_lang:
            continue
        if source == target:
            distance = 0.0
        elif (source, target) in table:
            distance = table.get(source, target)
        else:
            continue
        languages.append(target if anchor == Anchor.FIX_SOURCE else source)
        distances.append(distance)
        values.append(score)
    if len(distances) < 2:
        raise InsufficientDataError(
            f"{table.name} vs {scores.task.value}: only {len(distances)} pairs share "
            f"{anchor.value} language {anchor_lang}"
        )
    rho = spearman(distances, values)
    distance_ranks = rankdata(distances, method="average")
    score_ranks = rankdata(values, method="average")
    pairs = [
        PairRank(
            language=lang,
            distance=d,
            score=s,
            distance_rank=float(dr),
            score_rank=float(sr),
        )
        for lang, d, s, dr, sr in zip(languages, distances, values, distance_ranks, score_ranks)
    ]
    logger.info(
        f"{measure or table.name} vs {scores.task.value} ({anchor.value}={anchor_lang}): "
        f"n={len(pairs)} rho={rho:.4f}"
    )
    return CorrelationReport(
        measure=measure or table.name,
        task=scores.task,
        anchor=anchor,
        anchor_lang=anchor_lang,
        n=len(pairs),
        rho=rho,
        pairs=pairs,
        note=_interpretation(scores.task, scores.polarity),
    )


def summarize(reports: Iterable[CorrelationReport]) -> dict[str, float]:
    """Mean rho per measure across anchors."""
    by_measure: dict[str, list[float]] = {}
    for report in reports:
        by_measure.setdefault(report.measure, []).append(report.rho)
    return {m: math.fsum(rhos) / len(rhos) for m, rhos in sorted(by_measure.items())}


def best_measure(
    reports: Iterable[CorrelationReport], measures: Iterable[str], polarity: Polarity
) -> str:
    """
    Measure with the best mean rho: most positive when lower scores are better,
    most negative when higher scores are better. Ties go to the first name.
    """
    means = summarize(reports)
    candidates = sorted(m for m in set(measures) if m in means)
    if not candidates:
        raise InsufficientDataError("no reports for any of the candidate measures")
    sign = 1.0 if polarity == Polarity.LOWER_IS_BETTER else -1.0
    return max(candidates, key=lambda m: (sign * means[m], -candidates.index(m)))


# --------------------------------------------------------------------------
# Zero-shot family classification
# --------------------------------------------------------------------------


def eval_family_classification(
    params: ModelParams,
    manifest: CorpusManifest,
    features: Mapping[str, MelSpectrogram],
    registry: LanguageRegistry,
    train_languages: Sequence[str] | None = None,
) -> FamilyEvalResult:
    """
    Classify each val/test utterance into a training language and count it
    correct when that language's family matches the true language's family.
    """
    if train_languages is not None and tuple(sorted(train_languages)) != params.languages:
        raise DataValidationError("train languages do not match the classifier's languages")
    seen = set(params.languages)
    for split in (Split.VAL, Split.TEST):
        leaked = manifest.languages(split) & seen
        if leaked:
            raise DataValidationError(
                f"{split.value} languages overlap training languages: {', '.join(sorted(leaked))}"
            )

    accuracy: dict[str, float] = {}
    evaluated: dict[str, int] = {}
    confusion: dict[str, Counter] = {}
    for split in (Split.VAL, Split.TEST):
        utterances = manifest.utterances(split)
        if not utterances:
            continue
        correct = 0
        for utt in utterances:
            if utt.id not in features:
                raise DataValidationError(f"utterance {utt.id} has no features")
            true_family = registry.family(utt.language)
            index, _ = classify(params, features[utt.id])
            predicted_family = registry.family(params.languages[index])
            confusion.setdefault(true_family, Counter())[predicted_family] += 1
            correct += predicted_family == true_family
        accuracy[split.value] = correct / len(utterances)
        evaluated[split.value] = len(utterances)
        logger.info(
            f"Family accuracy on {split.value}: {accuracy[split.value]:.4f} "
            f"({correct}/{len(utterances)})"
        )

    families = {registry.family(lang) for lang in manifest.languages()}
    return FamilyEvalResult(
        accuracy=accuracy,
        evaluated=evaluated,
        confusion={t: dict(sorted(c.items())) for t, c in sorted(confusion.items())},
        n_families=len(families),
    )


def cer(hypothesis: str, reference: str) -> float:
    """Levenshtein distance over the reference length."""
    if not reference:
        raise DataValidationError("reference must be non-empty")
    return Levenshtein.distance(hypothesis, reference) / len(reference)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _report_key(report: CorrelationReport) -> tuple[str, str, str]:
    return report.measure, report.anchor.value, report.anchor_lang


def render_report_csv(reports: Iterable[CorrelationReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in sorted(reports, key=_report_key):
        writer.writerow([r.measure, r.anchor.value, r.anchor_lang, r.n, repr(r.rho)])
    return buffer.getvalue()


def emit_report(
    reports: Iterable[CorrelationReport],
    out_dir: str | Path,
    rankings: Mapping[str, Sequence[tuple[str, float]]] | None = None,
) -> tuple[Path, Path]:
    """Write report.csv and report.json, ordered by (measure, anchor, anchor_lang)."""
    ordered = sorted(reports, key=_report_key)
    out_dir = Path(out_dir)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"
    payload = {
        "reports": [r.model_dump(mode="json") for r in ordered],
        "summary": summarize(ordered),
    }
    if rankings:
        payload["rankings"] = {
            key: [{"language": lang, "distance": d} for lang, d in ranking]
            for key, ranking in sorted(rankings.items())
        }
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(render_report_csv(ordered), encoding="utf-8")
        json_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"cannot write report to {out_dir}: {e}") from e
    logger.info(f"Wrote {len(ordered)} correlation reports to {out_dir}")
    return csv_path, json_path
