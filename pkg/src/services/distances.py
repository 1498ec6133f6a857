"""
Distance Service
Acoustic, genetic and geographic language distances, min-max ensembles and
source-language ranking.
"""

import itertools
import logging
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import CoverageError, DataValidationError
from src.services.corpus import DistanceTable, FamilyTree, LanguageRegistry, save_distance_table
from src.services.embeddings import EmbeddingStore

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
DEGENERATE_RESCALE = 0.5


class Coordinate(BaseModel):
    model_config = ConfigDict(frozen=True)

    latitude: float = Field(ge=-90.0, le=90.0)
    longitude: float = Field(ge=-180.0, le=180.0)


def cosine_distance(x: np.ndarray, y: np.ndarray) -> float:
    """1 - cos(x, y), clipped to [0, 2]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataValidationError(f"dimension mismatch: {x.shape} vs {y.shape}")
    norm_x = np.linalg.norm(x)
    norm_y = np.linalg.norm(y)
    if norm_x == 0 or norm_y == 0:
        raise DataValidationError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - np.dot(x, y) / (norm_x * norm_y), 0.0, 2.0))


def acoustic_distance(store: EmbeddingStore, lang_a: str, lang_b: str) -> float:
    if lang_a == lang_b:
        store.vector(lang_a)
        return 0.0
    return cosine_distance(store.vector(lang_a), store.vector(lang_b))


def genetic_distance(tree: FamilyTree, lang_a: str, lang_b: str) -> float:
    """
    1 - shared / max(depth_a, depth_b), where shared counts the common
    ancestors of both leaves (root included, leaves excluded).
    """
    path_a = tree.path(lang_a)
    path_b = tree.path(lang_b)
    common = 0
    for step_a, step_b in zip(path_a[:-1], path_b[:-1]):
        if step_a != step_b:
            break
        common += 1
    shared = 1 + common
    return 1.0 - shared / max(len(path_a), len(path_b))


def geographic_distance(c1: Coordinate, c2: Coordinate) -> float:
    """Great-circle distance in km (haversine)."""
    lat1, lon1, lat2, lon2 = map(
        math.radians, (c1.latitude, c1.longitude, c2.latitude, c2.longitude)
    )
    a = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(
        (lon2 - lon1) / 2
    ) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.atan2(math.sqrt(a), math.sqrt(1.0 - a))


def coordinate_of(registry: LanguageRegistry, iso: str) -> Coordinate:
    entry = registry.entry(iso)
    return Coordinate(latitude=entry.latitude, longitude=entry.longitude)


# --------------------------------------------------------------------------
# Batch tables
# --------------------------------------------------------------------------


def all_pairs(languages: Iterable[str]) -> list[tuple[str, str]]:
    """Every unordered pair over sorted languages, self pairs included."""
    ordered = sorted(set(languages))
    return list(itertools.combinations_with_replacement(ordered, 2))


def acoustic_table(
    store: EmbeddingStore,
    languages: Sequence[str] | None = None,
    name: str = "speech-ce",
    expect_model_id: str | None = None,
) -> DistanceTable:
    if expect_model_id is not None and expect_model_id != store.model_id:
        raise DataValidationError(
            f"embedding store was built by model {store.model_id}, expected {expect_model_id}"
        )
    languages = store.languages() if languages is None else languages
    values = {(a, b): acoustic_distance(store, a, b) for a, b in all_pairs(languages)}
    return DistanceTable(name=name, values=values)


def genetic_table(tree: FamilyTree, languages: Sequence[str] | None = None) -> DistanceTable:
    languages = tree.leaves() if languages is None else languages
    values = {(a, b): genetic_distance(tree, a, b) for a, b in all_pairs(languages)}
    return DistanceTable(name="genetic", values=values)


def geodesic_table(
    registry: LanguageRegistry, languages: Sequence[str] | None = None
) -> DistanceTable:
    languages = sorted(registry.entries) if languages is None else languages
    values = {
        (a, b): 0.0
        if a == b
        else geographic_distance(coordinate_of(registry, a), coordinate_of(registry, b))
        for a, b in all_pairs(languages)
    }
    return DistanceTable(name="geodesic", values=values)


def save_table(table: DistanceTable, path: str | Path) -> None:
    save_distance_table(table, path)
    logger.info(f"Wrote {table.name} table with {len(table.unordered_pairs())} pairs to {path}")


# --------------------------------------------------------------------------
# Ensemble and ranking
# --------------------------------------------------------------------------


def _rescale(table: DistanceTable, pairs: Sequence[tuple[str, str]]) -> list[float]:
    raw = [table.get(a, b) for a, b in pairs]
    low, high = min(raw), max(raw)
    if high == low:
        return [DEGENERATE_RESCALE] * len(raw)
    return [(value - low) / (high - low) for value in raw]


def ensemble(
    tables: Sequence[DistanceTable], pairs: Iterable[tuple[str, str]]
) -> DistanceTable:
    """
    Mean of per-table min-max rescaled distances over the given pairs.

    The rescaling range is exactly the given pair set, self pairs included.
    A table whose distances are all equal over the pairs contributes 0.5 to
    every cross pair.
    """
    if len(tables) < 2:
        raise DataValidationError(f"ensemble needs at least 2 tables, got {len(tables)}")
    unique = sorted({(a, b) if a <= b else (b, a) for a, b in pairs})
    if not unique:
        raise DataValidationError("ensemble needs at least one pair")
    for table in tables:
        for a, b in unique:
            if (a, b) not in table:
                raise CoverageError(f"table {table.name} has no entry for pair ({a}, {b})")

    rescaled = [_rescale(table, unique) for table in tables]
    values = {
        pair: math.fsum(column[i] for column in rescaled) / len(tables)
        for i, pair in enumerate(unique)
    }
    # a self pair is the minimum of any non-negative table; keep it at 0 for degenerate ones
    values.update({(a, b): 0.0 for a, b in unique if a == b})
    constituents = tuple(table.name for table in tables)
    logger.info(f"Ensembled {', '.join(constituents)} over {len(unique)} pairs")
    return DistanceTable(name="ensemble", values=values, constituents=constituents)


def rank_sources(
    table: DistanceTable, target: str, candidates: Iterable[str]
) -> list[tuple[str, float]]:
    """Candidates by ascending distance to target; the target itself first, ties by ISO code."""
    scored = []
    for candidate in set(candidates):
        distance = 0.0 if candidate == target else table.get(candidate, target)
        scored.append((candidate, distance))
    return sorted(scored, key=lambda item: (item[0] != target, item[1], item[0]))
