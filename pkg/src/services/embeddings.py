"""
Embedding Service
Per-language mean embeddings, the JSON embedding store and k-means clustering.
"""

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from src.core.errors import ArtifactIOError, DataValidationError, LanguageLookupError, ParseError
from src.services.corpus import CorpusManifest, Split
from src.services.features import MelSpectrogram
from src.services.model import ModelParams, encode_speech

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LanguageEmbedding:
    language: str
    vector: np.ndarray
    n_samples: int
    model_id: str

    def __post_init__(self):
        vector = np.array(self.vector, dtype=np.float64)
        if vector.ndim != 1:
            raise DataValidationError(f"embedding for {self.language} must be a vector")
        if not np.all(np.isfinite(vector)):
            raise DataValidationError(f"embedding for {self.language} has non-finite values")
        if self.n_samples < 1:
            raise DataValidationError(f"embedding for {self.language} needs n_samples >= 1")
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)


@dataclass(frozen=True)
class EmbeddingStore:
    """Language embeddings from a single model, all of one dimension."""

    embeddings: Mapping[str, LanguageEmbedding] = field(default_factory=dict)
    embed_dim: int = 0
    model_id: str = ""

    def __post_init__(self):
        for iso, emb in self.embeddings.items():
            if emb.language != iso:
                raise DataValidationError(f"store key {iso} holds an embedding for {emb.language}")
            if len(emb.vector) != self.embed_dim:
                raise DataValidationError(
                    f"embedding for {iso} has dimension {len(emb.vector)}, "
                    f"store has {self.embed_dim}"
                )
            if emb.model_id != self.model_id:
                raise DataValidationError(
                    f"embedding for {iso} comes from model {emb.model_id}, "
                    f"store from {self.model_id}"
                )
        object.__setattr__(self, "embeddings", MappingProxyType(dict(self.embeddings)))

    def __contains__(self, iso: object) -> bool:
        return iso in self.embeddings

    def __len__(self) -> int:
        return len(self.embeddings)

    def languages(self) -> list[str]:
        return sorted(self.embeddings)

    def vector(self, iso: str) -> np.ndarray:
        try:
            return self.embeddings[iso].vector
        except KeyError:
            raise LanguageLookupError(f"language {iso!r} not in embedding store") from None


def embed_language(
    params: ModelParams,
    specs: Sequence[MelSpectrogram],
    language: str,
    model_id: str | None = None,
) -> LanguageEmbedding:
    """Mean of the unit encoder outputs, summed in source_id order; not re-normalized."""
    if not specs:
        raise DataValidationError(f"no samples to embed for language {language}")
    total = None
    for spec in sorted(specs, key=lambda s: s.source_id):
        output = encode_speech(params, spec).astype(np.float64)
        total = output if total is None else total + output
    return LanguageEmbedding(
        language=language,
        vector=total / len(specs),
        n_samples=len(specs),
        model_id=model_id if model_id is not None else params.checksum(),
    )


def build_store(
    params: ModelParams,
    manifest: CorpusManifest,
    features: Mapping[str, MelSpectrogram],
    split: Split | None = None,
    max_samples: int | None = None,
    model_id: str | None = None,
) -> EmbeddingStore:
    """Embed every language of the manifest (optionally one split, capped per language)."""
    model_id = model_id if model_id is not None else params.checksum()
    by_language: dict[str, list[str]] = {}
    for utt in manifest.utterances(split):
        by_language.setdefault(utt.language, []).append(utt.id)
    embeddings = {}
    for language in sorted(by_language):
        ids = sorted(by_language[language])
        if max_samples is not None:
            ids = ids[:max_samples]
        missing = [i for i in ids if i not in features]
        if missing:
            raise DataValidationError(f"utterance {missing[0]} has no features")
        embeddings[language] = embed_language(
            params, [features[i] for i in ids], language, model_id
        )
        logger.debug(f"Embedded {language} from {len(ids)} samples")
    if not embeddings:
        raise DataValidationError("no utterances to embed")
    logger.info(f"Embedded {len(embeddings)} languages")
    return EmbeddingStore(embeddings, params.encoder.embed_dim, model_id)


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    """JSON with floats at shortest round-trip precision."""
    payload = {
        "model_id": store.model_id,
        "embed_dim": store.embed_dim,
        "embeddings": {iso: store.embeddings[iso].vector.tolist() for iso in store.languages()},
        "n_samples": {iso: store.embeddings[iso].n_samples for iso in store.languages()},
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"cannot write embedding store {path}: {e}") from e
    logger.info(f"Wrote {len(store)} embeddings to {path}")


def load_store(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"cannot read embedding store {path}: {e}") from e
    try:
        payload = json.loads(text)
        model_id = str(payload["model_id"])
        embed_dim = int(payload["embed_dim"])
        vectors = payload["embeddings"]
        counts = payload.get("n_samples", {})
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON in {path}: {e.msg}", line=e.lineno) from e
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: missing or bad store field ({e})") from e
    embeddings = {
        iso: LanguageEmbedding(
            iso, np.array(vec, dtype=np.float64), int(counts.get(iso, 1)), model_id
        )
        for iso, vec in vectors.items()
    }
    return EmbeddingStore(embeddings, embed_dim, model_id)


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KMeansResult:
    assignments: dict[str, int]
    inertia: float
    inertia_trace: tuple[float, ...]
    centroids: np.ndarray
    iterations: int


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(0, n))]
    for _ in range(1, k):
        dist_sq = _squared_distances(points, points[chosen]).min(axis=1)
        total = dist_sq.sum()
        if total > 0:
            chosen.append(int(rng.choice(n, p=dist_sq / total)))
        else:
            # all remaining points coincide with a centroid
            chosen.append(next(i for i in range(n) if i not in chosen))
    return points[chosen].copy()


def kmeans(store: EmbeddingStore, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """
    Lloyd's algorithm with seeded k-means++ initialization over languages in
    sorted ISO order. Ties go to the lowest cluster id; an empty cluster keeps
    its centroid. Stops when assignments stop changing or after max_iters.
    """
    languages = store.languages()
    if not 1 <= k <= len(languages):
        raise DataValidationError(f"k must be in [1, {len(languages)}], got {k}")
    points = np.stack([store.vector(iso) for iso in languages])
    centroids = kmeans_plusplus_init(points, k, np.random.default_rng(seed))

    def inertia(labels: np.ndarray) -> float:
        return float(((points - centroids[labels]) ** 2).sum())

    labels = _squared_distances(points, centroids).argmin(axis=1)
    trace = [inertia(labels)]
    iterations = 0
    for iterations in range(1, max_iters + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
        new_labels = _squared_distances(points, centroids).argmin(axis=1)
        trace.append(inertia(new_labels))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    logger.info(f"k-means k={k} converged after {iterations} iterations, inertia {trace[-1]:.6g}")
    return KMeansResult(
        assignments={iso: int(label) for iso, label in zip(languages, labels)},
        inertia=trace[-1],
        inertia_trace=tuple(trace),
        centroids=centroids,
        iterations=iterations,
    )
