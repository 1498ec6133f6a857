"""
Corpus Service
Loads and validates speech manifests, language metadata, family trees,
precomputed distance tables and downstream score tables.
"""

import csv
import json
import logging
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Literal

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.core.errors import (
    ArtifactIOError,
    CoverageError,
    DataValidationError,
    LanguageLookupError,
    ParseError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SYMMETRY_TOLERANCE = 1e-9
RANGE_TOLERANCE = 1e-12

TableName = Literal[
    "genetic",
    "inventory",
    "syntactic",
    "phonological",
    "featural",
    "geographic",
    "geodesic",
    "speech-ce",
    "speech-sc",
    "multimodal",
    "ensemble",
    "custom",
]
TABLE_NAMES: tuple[str, ...] = TableName.__args__  # type: ignore[attr-defined]
TYPOLOGICAL_TABLES = frozenset(
    {"genetic", "inventory", "syntactic", "phonological", "featural", "geographic"}
)
COSINE_TABLES = frozenset({"speech-ce", "speech-sc", "multimodal"})


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Task(str, Enum):
    CER = "CER"
    MCD = "MCD"
    MOS = "MOS"


class Polarity(str, Enum):
    LOWER_IS_BETTER = "lower_is_better"
    HIGHER_IS_BETTER = "higher_is_better"


TASK_POLARITY = {
    Task.CER: Polarity.LOWER_IS_BETTER,
    Task.MCD: Polarity.LOWER_IS_BETTER,
    Task.MOS: Polarity.HIGHER_IS_BETTER,
}


def _pydantic_message(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(p) for p in first.get("loc", ()))
    return f"{where}: {first['msg']}" if where else first["msg"]


class Utterance(BaseModel):
    """One audio sample with its language label."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    language: str = Field(pattern=r"^[a-z]{3}$")
    audio_path: str
    text: str | None = None
    sample_count: int | None = Field(default=None, ge=0)
    sample_rate: int = SAMPLE_RATE

    @field_validator("text")
    @classmethod
    def _printable_ascii(cls, value: str | None) -> str | None:
        if value is not None and not all(32 <= ord(ch) < 127 for ch in value):
            raise ValueError("text must be pre-romanized printable ASCII")
        return value

    @field_validator("sample_rate")
    @classmethod
    def _fixed_rate(cls, value: int) -> int:
        if value != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        return value


@dataclass(frozen=True)
class CorpusManifest:
    """Ordered utterances with their split labels."""

    records: tuple[Utterance, ...] = ()
    splits: tuple[Split, ...] = ()
    zero_shot: bool = False

    def __post_init__(self):
        if len(self.records) != len(self.splits):
            raise DataValidationError("every manifest record needs exactly one split")
        seen: set[str] = set()
        for utt in self.records:
            if utt.id in seen:
                raise DataValidationError(f"duplicate utterance id {utt.id!r}")
            seen.add(utt.id)
        if self.zero_shot:
            overlap = self.languages(Split.TRAIN) & (
                self.languages(Split.VAL) | self.languages(Split.TEST)
            )
            if overlap:
                raise DataValidationError(
                    f"zero-shot manifest has languages in both train and val/test: "
                    f"{', '.join(sorted(overlap))}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[tuple[Utterance, Split]]:
        return iter(zip(self.records, self.splits))

    def utterances(self, split: Split | None = None) -> list[Utterance]:
        return [u for u, s in self if split is None or s == split]

    def languages(self, split: Split | None = None) -> set[str]:
        return {u.language for u in self.utterances(split)}


@dataclass(frozen=True)
class RegistryEntry:
    family: str
    latitude: float
    longitude: float


class _RegistryRow(BaseModel):
    lang: str = Field(pattern=r"^[a-z]{3}$")
    family: str = Field(min_length=1)
    lat: float = Field(ge=-90.0, le=90.0)
    lon: float = Field(ge=-180.0, le=180.0)


@dataclass(frozen=True)
class LanguageRegistry:
    """ISO code -> (family, latitude, longitude)."""

    entries: Mapping[str, RegistryEntry] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __contains__(self, iso: object) -> bool:
        return iso in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, iso: str) -> RegistryEntry:
        try:
            return self.entries[iso]
        except KeyError:
            raise LanguageLookupError(f"language {iso!r} not in registry") from None

    def family(self, iso: str) -> str:
        return self.entry(iso).family


@dataclass(frozen=True)
class TreeNode:
    name: str
    children: tuple["TreeNode", ...] = ()
    iso: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class FamilyTree:
    """Nested language family tree; leaves carry ISO codes."""

    root: TreeNode
    _paths: Mapping[str, tuple[int, ...]] = field(init=False, repr=False, compare=False)
    _families: Mapping[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.root.is_leaf:
            raise DataValidationError("family tree must have depth >= 1")
        paths: dict[str, tuple[int, ...]] = {}
        families: dict[str, str] = {}

        def walk(node: TreeNode, path: tuple[int, ...], family: str | None) -> None:
            if node.is_leaf:
                if node.iso is None:
                    raise DataValidationError(f"leaf {node.name!r} has no iso code")
                if node.iso in paths:
                    raise DataValidationError(f"iso code {node.iso!r} appears twice in tree")
                paths[node.iso] = path
                families[node.iso] = family or node.name
                return
            if node.iso is not None:
                raise DataValidationError(f"internal node {node.name!r} carries an iso code")
            for i, child in enumerate(node.children):
                walk(child, path + (i,), family if path else child.name)

        walk(self.root, (), None)
        object.__setattr__(self, "_paths", MappingProxyType(paths))
        object.__setattr__(self, "_families", MappingProxyType(families))

    def __contains__(self, iso: object) -> bool:
        return iso in self._paths

    def leaves(self) -> list[str]:
        return sorted(self._paths)

    def path(self, iso: str) -> tuple[int, ...]:
        """Child positions from the root to the leaf; its length is the leaf depth."""
        try:
            return self._paths[iso]
        except KeyError:
            raise LanguageLookupError(f"language {iso!r} not in family tree") from None

    def depth(self, iso: str) -> int:
        return len(self.path(iso))

    def family_of(self, iso: str) -> str:
        """Name of the top-level family containing `iso`."""
        self.path(iso)
        return self._families[iso]


def _check_range(name: str, a: str, b: str, value: float) -> None:
    if not math.isfinite(value):
        raise DataValidationError(f"table {name}: non-finite distance for ({a}, {b})")
    if name in TYPOLOGICAL_TABLES or name == "ensemble":
        low, high = 0.0, 1.0
    elif name in COSINE_TABLES:
        low, high = 0.0, 2.0
    elif name == "geodesic":
        low, high = 0.0, math.inf
    else:
        return
    if value < low - RANGE_TOLERANCE or value > high + RANGE_TOLERANCE:
        raise DataValidationError(
            f"table {name}: distance {value} for ({a}, {b}) outside [{low}, {high}]"
        )


@dataclass(frozen=True)
class DistanceTable:
    """Pairwise language distances. Missing reverse pairs are mirrored on construction."""

    name: str
    values: Mapping[tuple[str, str], float]
    constituents: tuple[str, ...] = ()

    def __post_init__(self):
        if self.name not in TABLE_NAMES:
            raise DataValidationError(f"unknown table name {self.name!r}")
        merged: dict[tuple[str, str], float] = {}
        for (a, b), value in self.values.items():
            value = float(value)
            _check_range(self.name, a, b, value)
            if a == b and abs(value) > RANGE_TOLERANCE:
                raise DataValidationError(f"table {self.name}: d({a}, {a}) = {value}, expected 0")
            merged[(a, b)] = value
        for (a, b), value in list(merged.items()):
            mirror = merged.get((b, a))
            if mirror is None:
                merged[(b, a)] = value
            elif abs(mirror - value) > SYMMETRY_TOLERANCE:
                raise DataValidationError(
                    f"table {self.name}: asymmetric entries d({a}, {b}) = {value} "
                    f"and d({b}, {a}) = {mirror}"
                )
        object.__setattr__(self, "values", MappingProxyType(merged))
        object.__setattr__(self, "constituents", tuple(self.constituents))

    def __contains__(self, pair: object) -> bool:
        return pair in self.values

    def get(self, a: str, b: str) -> float:
        try:
            return self.values[(a, b)]
        except KeyError:
            raise CoverageError(f"table {self.name} has no entry for pair ({a}, {b})") from None

    @property
    def languages(self) -> set[str]:
        return {lang for pair in self.values for lang in pair}

    def unordered_pairs(self) -> list[tuple[str, str]]:
        """Each stored pair once, as (a, b) with a <= b, sorted."""
        return sorted({(a, b) if a <= b else (b, a) for a, b in self.values})


@dataclass(frozen=True)
class ScoreTable:
    """Downstream task scores keyed by (source, target)."""

    task: Task
    values: Mapping[tuple[str, str], float]

    def __post_init__(self):
        task = Task(self.task)
        for (source, target), value in self.values.items():
            if not math.isfinite(value):
                raise DataValidationError(
                    f"{task.value}: non-finite score for ({source}, {target})"
                )
            if task in (Task.CER, Task.MCD) and value < 0:
                raise DataValidationError(
                    f"{task.value}: score {value} for ({source}, {target}) must be >= 0"
                )
            if task == Task.MOS and not 1.0 <= value <= 5.0:
                raise DataValidationError(
                    f"MOS: score {value} for ({source}, {target}) outside [1, 5]"
                )
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "values", MappingProxyType(dict(self.values)))

    @property
    def polarity(self) -> Polarity:
        return TASK_POLARITY[self.task]


# --------------------------------------------------------------------------
# Loaders
# --------------------------------------------------------------------------


def _open_text(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"file not found: {path}")
    try:
        return open(path, encoding="utf-8", newline="")
    except OSError as e:
        raise ArtifactIOError(f"cannot open {path}: {e}") from e


def load_manifest(path: str | Path, zero_shot: bool = False) -> CorpusManifest:
    """Load a JSON Lines manifest, one utterance per line."""
    records: list[Utterance] = []
    splits: list[Split] = []
    seen: set[str] = set()
    with _open_text(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON in {path}: {e.msg}", line=line_no) from e
            if not isinstance(row, dict):
                raise ParseError(f"expected a JSON object in {path}", line=line_no)
            missing = {"id", "lang", "audio", "split"} - row.keys()
            if missing:
                raise DataValidationError(
                    f"missing keys {sorted(missing)} in {path}", line=line_no
                )
            try:
                split = Split(row["split"])
            except ValueError:
                raise DataValidationError(
                    f"unknown split {row['split']!r} in {path}", line=line_no
                ) from None
            try:
                utt = Utterance(
                    id=row["id"],
                    language=row["lang"],
                    audio_path=row["audio"],
                    text=row.get("text"),
                    sample_count=row.get("samples"),
                )
            except ValidationError as e:
                raise DataValidationError(_pydantic_message(e), line=line_no) from e
            if utt.id in seen:
                raise DataValidationError(f"duplicate utterance id {utt.id!r}", line=line_no)
            seen.add(utt.id)
            records.append(utt)
            splits.append(split)
    manifest = CorpusManifest(records=tuple(records), splits=tuple(splits), zero_shot=zero_shot)
    logger.info(f"Loaded {len(manifest)} utterances from {path}")
    return manifest


def _read_csv(path: str | Path, header: tuple[str, ...]) -> Iterator[tuple[int, dict[str, str]]]:
    """Yield (line number, row) under a mandatory header; leading '#' lines are skipped."""
    with _open_text(path) as f:
        lines = list(f)
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        start += 1
    reader = csv.reader(lines[start:])
    try:
        found = next(reader)
    except StopIteration:
        raise ParseError(f"{path} is empty; expected header {','.join(header)}") from None
    if tuple(col.strip() for col in found) != header:
        raise ParseError(
            f"{path}: expected header {','.join(header)}, got {','.join(found)}", line=start + 1
        )
    for offset, row in enumerate(reader):
        line_no = start + 2 + offset
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: expected {len(header)} columns", line=line_no)
        yield line_no, dict(zip(header, (cell.strip() for cell in row)))


def _comment_lines(path: str | Path) -> list[str]:
    with _open_text(path) as f:
        comments = []
        for line in f:
            if not line.startswith("#"):
                break
            comments.append(line[1:].strip())
    return comments


def _parse_float(raw: str, column: str, path: str | Path, line_no: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ParseError(
            f"{path}: column {column} is not a number: {raw!r}", line=line_no
        ) from None


def load_registry(path: str | Path) -> LanguageRegistry:
    """Load a registry CSV with header lang,family,lat,lon."""
    entries: dict[str, RegistryEntry] = {}
    for line_no, row in _read_csv(path, ("lang", "family", "lat", "lon")):
        values: dict[str, Any] = dict(row)
        values["lat"] = _parse_float(row["lat"], "lat", path, line_no)
        values["lon"] = _parse_float(row["lon"], "lon", path, line_no)
        try:
            parsed = _RegistryRow(**values)
        except ValidationError as e:
            raise DataValidationError(_pydantic_message(e), line=line_no) from e
        if parsed.lang in entries:
            raise DataValidationError(f"duplicate registry entry {parsed.lang!r}", line=line_no)
        entries[parsed.lang] = RegistryEntry(parsed.family, parsed.lat, parsed.lon)
    logger.info(f"Loaded {len(entries)} registry entries from {path}")
    return LanguageRegistry(entries)


def _node_from_json(obj: Any, where: str) -> TreeNode:
    if not isinstance(obj, dict) or not isinstance(obj.get("name"), str):
        raise DataValidationError(f"tree node at {where} needs a string 'name'")
    children = obj.get("children", [])
    if not isinstance(children, list):
        raise DataValidationError(f"tree node at {where}: 'children' must be a list")
    iso = obj.get("iso")
    if iso is not None and not (isinstance(iso, str) and len(iso) == 3 and iso.islower()):
        raise DataValidationError(f"tree node at {where}: bad iso code {iso!r}")
    return TreeNode(
        name=obj["name"],
        children=tuple(
            _node_from_json(child, f"{where}/{i}") for i, child in enumerate(children)
        ),
        iso=iso,
    )


def load_tree(path: str | Path) -> FamilyTree:
    """Load a nested JSON family tree."""
    with _open_text(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON in {path}: {e.msg}", line=e.lineno) from e
    tree = FamilyTree(_node_from_json(data, "root"))
    logger.info(f"Loaded family tree with {len(tree.leaves())} languages from {path}")
    return tree


def load_distance_table(path: str | Path, name: str) -> DistanceTable:
    """Load a distance CSV with header lang_a,lang_b,distance."""
    values: dict[tuple[str, str], float] = {}
    for line_no, row in _read_csv(path, ("lang_a", "lang_b", "distance")):
        pair = (row["lang_a"], row["lang_b"])
        if pair in values:
            raise DataValidationError(f"duplicate pair {pair} in {path}", line=line_no)
        values[pair] = _parse_float(row["distance"], "distance", path, line_no)
    constituents: tuple[str, ...] = ()
    for comment in _comment_lines(path):
        if comment.startswith("constituents:"):
            constituents = tuple(
                part.strip() for part in comment.split(":", 1)[1].split(",") if part.strip()
            )
    table = DistanceTable(name=name, values=values, constituents=constituents)
    logger.info(f"Loaded {name} table with {len(table.unordered_pairs())} pairs from {path}")
    return table


def load_score_table(path: str | Path, task: Task | str) -> ScoreTable:
    """Load a score CSV with header source,target,score."""
    values: dict[tuple[str, str], float] = {}
    for line_no, row in _read_csv(path, ("source", "target", "score")):
        pair = (row["source"], row["target"])
        if pair in values:
            raise DataValidationError(f"duplicate pair {pair} in {path}", line=line_no)
        values[pair] = _parse_float(row["score"], "score", path, line_no)
    table = ScoreTable(task=Task(task), values=values)
    logger.info(f"Loaded {len(values)} {table.task.value} scores from {path}")
    return table


# --------------------------------------------------------------------------
# Writers
# --------------------------------------------------------------------------


def _open_for_write(path: str | Path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", encoding="utf-8", newline="")
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}") from e


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    with _open_for_write(path) as f:
        for utt, split in manifest:
            row: dict[str, Any] = {
                "id": utt.id,
                "lang": utt.language,
                "audio": utt.audio_path,
                "split": split.value,
            }
            if utt.text is not None:
                row["text"] = utt.text
            if utt.sample_count is not None:
                row["samples"] = utt.sample_count
            f.write(json.dumps(row) + "\n")


def save_registry(registry: LanguageRegistry, path: str | Path) -> None:
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["lang", "family", "lat", "lon"])
        for iso in sorted(registry.entries):
            entry = registry.entries[iso]
            writer.writerow([iso, entry.family, repr(entry.latitude), repr(entry.longitude)])


def _node_to_json(node: TreeNode) -> dict[str, Any]:
    if node.is_leaf:
        return {"name": node.name, "iso": node.iso}
    return {"name": node.name, "children": [_node_to_json(c) for c in node.children]}


def save_tree(tree: FamilyTree, path: str | Path) -> None:
    with _open_for_write(path) as f:
        json.dump(_node_to_json(tree.root), f, indent=2)
        f.write("\n")


def save_distance_table(table: DistanceTable, path: str | Path) -> None:
    """Write each unordered pair once; ensembles record their constituents in a comment line."""
    with _open_for_write(path) as f:
        if table.constituents:
            f.write(f"# constituents: {','.join(table.constituents)}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["lang_a", "lang_b", "distance"])
        for a, b in table.unordered_pairs():
            writer.writerow([a, b, repr(table.values[(a, b)])])


def save_score_table(table: ScoreTable, path: str | Path) -> None:
    with _open_for_write(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["source", "target", "score"])
        for (source, target), value in sorted(table.values.items()):
            writer.writerow([source, target, repr(value)])


# --------------------------------------------------------------------------
# Audio
# --------------------------------------------------------------------------


def _checked_wav_info(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except sf.LibsndfileError as e:
        raise UnsupportedFormatError(f"{path}: not a readable audio file ({e})") from e
    if info.format != "WAV" or info.subtype != "PCM_16":
        raise UnsupportedFormatError(
            f"{path}: expected 16-bit PCM WAV, got {info.format}/{info.subtype}"
        )
    if info.channels != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got {info.channels} channels")
    if info.samplerate != SAMPLE_RATE:
        raise UnsupportedFormatError(
            f"{path}: sample rate {info.samplerate} Hz, expected {SAMPLE_RATE} Hz"
        )
    return info


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a 16 kHz mono 16-bit PCM WAV as float64 samples in [-1, 1]."""
    _checked_wav_info(path)
    samples, rate = sf.read(str(path), dtype="float64", always_2d=False)
    return samples, rate


def write_wav(path: str | Path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.asarray(samples, dtype=np.float64), rate, subtype="PCM_16")


def fill_sample_counts(
    manifest: CorpusManifest, base_dir: str | Path | None = None
) -> CorpusManifest:
    """Fill sample_count from the audio headers, validating each file's format.

    Relative audio paths are taken relative to base_dir when given.
    """
    records = []
    for utt in manifest.records:
        path = Path(utt.audio_path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        info = _checked_wav_info(path)
        records.append(utt.model_copy(update={"sample_count": int(info.frames)}))
    return CorpusManifest(tuple(records), manifest.splits, manifest.zero_shot)


def split_languages(
    manifest: CorpusManifest,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> CorpusManifest:
    """Reassign splits by language so that no language spans two splits (zero-shot)."""
    valid = len(fractions) == 3 and all(f >= 0 for f in fractions)
    if not valid or not math.isclose(sum(fractions), 1.0):
        raise DataValidationError("split fractions must be 3 non-negative values summing to 1")
    languages = sorted(manifest.languages())
    order = np.random.default_rng(seed).permutation(len(languages))
    n_train = int(round(fractions[0] * len(languages)))
    n_val = int(round(fractions[1] * len(languages)))
    assignment: dict[str, Split] = {}
    for rank, index in enumerate(order):
        if rank < n_train:
            split = Split.TRAIN
        elif rank < n_train + n_val:
            split = Split.VAL
        else:
            split = Split.TEST
        assignment[languages[index]] = split
    splits = tuple(assignment[u.language] for u in manifest.records)
    logger.info(
        f"Split {len(languages)} languages into "
        f"{sum(s == Split.TRAIN for s in assignment.values())} train / "
        f"{sum(s == Split.VAL for s in assignment.values())} val / "
        f"{sum(s == Split.TEST for s in assignment.values())} test"
    )
    return CorpusManifest(manifest.records, splits, zero_shot=True)


def load_pair_list(path: str | Path) -> list[tuple[str, str]]:
    """Load an explicit pair set, CSV with header lang_a,lang_b."""
    pairs = [(row["lang_a"], row["lang_b"]) for _, row in _read_csv(path, ("lang_a", "lang_b"))]
    if not pairs:
        raise DataValidationError(f"{path} lists no pairs")
    return pairs
