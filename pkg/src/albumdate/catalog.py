"""Photo manifest ingestion, label maps, splits and class weighting.

The catalog is the single source of truth for which photographs exist, what
year and context they carry, and which split each one belongs to. Region
crops never get their own split: they inherit the split of their parent
photo so that no training face or person can leak into validation or test.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

ARCHIVE_YEAR_MIN = 1845
ARCHIVE_YEAR_MAX = 2009

MANIFEST_FIELDS = ("photo_id", "image_path", "year", "context", "description", "city", "nation")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.72, 0.08, 0.20)
TASKS = ("dating", "context")


class ManifestError(ValueError):
    """The manifest file cannot be read as a whole (bad header, bad format)."""


class UnknownParentError(KeyError):
    pass


class ContextClass(enum.Enum):
    """The nine grouped socio-historical contexts, in canonical index order."""

    WORK = "Work"
    FREE_TIME = "FreeTime"
    MOTORIZATION = "Motorization"
    MUSIC = "Music"
    FASHION = "Fashion"
    AFFECTIVITY = "Affectivity"
    RITES = "Rites"
    SCHOOL = "School"
    POLITICS = "Politics"

    @property
    def index(self) -> int:
        return _CONTEXT_ORDER.index(self)

    @property
    def description(self) -> str:
        return _CONTEXT_DESCRIPTIONS[self]

    @classmethod
    def parse(cls, label: str) -> "ContextClass":
        """Accept canonical names plus common spellings ("Free-time", "free time")."""
        key = re.sub(r"[^a-z]", "", label.lower())
        try:
            return _CONTEXT_LOOKUP[key]
        except KeyError:
            raise ValueError(f"unknown context label {label!r}") from None

    @classmethod
    def from_index(cls, index: int) -> "ContextClass":
        return _CONTEXT_ORDER[index]


_CONTEXT_ORDER = tuple(ContextClass)
_CONTEXT_LOOKUP = {c.value.lower(): c for c in ContextClass}
_CONTEXT_DESCRIPTIONS = {
    ContextClass.WORK: "people in workplaces or wearing work clothes",
    ContextClass.FREE_TIME: "leisure time and holidays, trips, landmarks, nature",
    ContextClass.MOTORIZATION: "cars, motorcycles and other vehicles as symbolic objects",
    ContextClass.MUSIC: "musical instruments and musical events",
    ContextClass.FASHION: "clothing, traditions and symbolic garments",
    ContextClass.AFFECTIVITY: "couples, friends and families bound by relationships",
    ContextClass.RITES: "sacred or celebratory family events, marriages",
    ContextClass.SCHOOL: "schools, classrooms, groups of students",
    ContextClass.POLITICS: "political gatherings, demonstrations and events",
}


@dataclass(frozen=True)
class DatingLabelMap:
    """Bijection between calendar years and dating class indices."""

    year_min: int = 1930
    year_max: int = 1999

    @property
    def num_classes(self) -> int:
        return self.year_max - self.year_min + 1

    def index(self, year: int) -> int:
        if not self.year_min <= year <= self.year_max:
            raise ValueError(f"year {year} outside [{self.year_min}, {self.year_max}]")
        return year - self.year_min

    def year_of(self, index: int) -> int:
        if not 0 <= index < self.num_classes:
            raise ValueError(f"class index {index} outside [0, {self.num_classes})")
        return self.year_min + index

    def contains(self, year: int) -> bool:
        return self.year_min <= year <= self.year_max


DATING_LABELS = DatingLabelMap()


def num_classes(task: str) -> int:
    if task == "dating":
        return DATING_LABELS.num_classes
    if task == "context":
        return len(ContextClass)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class PhotoRecord:
    photo_id: str
    image_ref: str
    year: int
    context: ContextClass
    description: str = ""
    city: str = ""
    nation: str = ""
    split: str = "unassigned"

    def label(self, task: str) -> int:
        if task == "dating":
            return DATING_LABELS.index(self.year)
        if task == "context":
            return self.context.index
        raise ValueError(f"unknown task {task!r}")

    def to_dict(self) -> dict:
        return {
            "photo_id": self.photo_id,
            "image_path": self.image_ref,
            "year": self.year,
            "context": self.context.value,
            "description": self.description,
            "city": self.city,
            "nation": self.nation,
            "split": self.split,
        }


@dataclass(frozen=True)
class Rejection:
    """A manifest row that failed validation. ``line`` is 1-based, header is line 1."""

    line: int
    photo_id: str
    reason: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"line": self.line, "photo_id": self.photo_id, "reason": self.reason, "detail": self.detail}


@dataclass(frozen=True)
class Catalog:
    records: tuple[PhotoRecord, ...]
    rejections: tuple[Rejection, ...] = ()
    _index: Mapping[str, PhotoRecord] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        index = {}
        for r in self.records:
            if r.photo_id in index:
                raise ValueError(f"duplicate photo_id {r.photo_id!r}")
            index[r.photo_id] = r
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PhotoRecord]:
        return iter(self.records)

    def __contains__(self, photo_id: object) -> bool:
        return photo_id in self._index

    def __getitem__(self, photo_id: str) -> PhotoRecord:
        return self._index[photo_id]

    @property
    def photo_ids(self) -> list[str]:
        return [r.photo_id for r in self.records]

    def filter(self, keep) -> "Catalog":
        return Catalog(tuple(r for r in self.records if keep(r)), self.rejections)

    def with_splits(self, split: "SplitAssignment") -> "Catalog":
        return Catalog(
            tuple(replace(r, split=split.assignments[r.photo_id]) for r in self.records),
            self.rejections,
        )

    def in_split(self, name: str) -> list[PhotoRecord]:
        return [r for r in self.records if r.split == name]

    def to_json(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "rejections": [r.to_dict() for r in self.rejections],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Catalog":
        records = tuple(
            PhotoRecord(
                photo_id=d["photo_id"],
                image_ref=d["image_path"],
                year=int(d["year"]),
                context=ContextClass.parse(d["context"]),
                description=d.get("description", ""),
                city=d.get("city", ""),
                nation=d.get("nation", ""),
                split=d.get("split", "unassigned"),
            )
            for d in data["records"]
        )
        rejections = tuple(Rejection(**d) for d in data.get("rejections", []))
        return cls(records, rejections)


def _iter_manifest_rows(path: Path) -> Iterator[tuple[int, dict | None, str]]:
    """Yield ``(line, row, error)``; ``row`` is None when the line cannot be parsed."""
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".jsonl", ".ndjson"):
        lines = text.splitlines()
        if not lines:
            raise ManifestError(f"{path}: empty manifest (header row required)")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: header row is not valid JSON: {exc}") from None
        if header != list(MANIFEST_FIELDS):
            raise ManifestError(f"{path}: header must list fields {MANIFEST_FIELDS}, got {header}")
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                yield lineno, None, str(exc)
                continue
            if not isinstance(row, dict):
                yield lineno, None, "record is not a JSON object"
                continue
            yield lineno, row, ""
        return

    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}: empty manifest (header row required)") from None
    if tuple(h.strip() for h in header) != MANIFEST_FIELDS:
        raise ManifestError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}, got {','.join(header)}")
    for fields in reader:
        lineno = reader.line_num
        if not any(f.strip() for f in fields):
            continue
        if len(fields) != len(MANIFEST_FIELDS):
            yield lineno, None, f"expected {len(MANIFEST_FIELDS)} fields, got {len(fields)}"
            continue
        yield lineno, dict(zip(MANIFEST_FIELDS, fields)), ""


def _validate_row(lineno: int, row: Mapping) -> PhotoRecord | Rejection:
    photo_id = str(row.get("photo_id", "")).strip()
    if not photo_id:
        return Rejection(lineno, "", "unparsable row", "empty photo_id")
    missing = [f for f in ("image_path", "year", "context") if f not in row]
    if missing:
        return Rejection(lineno, photo_id, "unparsable row", f"missing fields {missing}")
    try:
        year = int(str(row["year"]).strip())
    except ValueError:
        return Rejection(lineno, photo_id, "unparsable row", f"year {row['year']!r} is not an integer")
    try:
        context = ContextClass.parse(str(row["context"]))
    except ValueError:
        return Rejection(lineno, photo_id, "unknown context label", str(row["context"]))
    if not ARCHIVE_YEAR_MIN <= year <= ARCHIVE_YEAR_MAX:
        return Rejection(lineno, photo_id, "year out of archive range", str(year))
    image_ref = str(row["image_path"]).strip()
    if not image_ref:
        return Rejection(lineno, photo_id, "unparsable row", "empty image_path")
    return PhotoRecord(
        photo_id=photo_id,
        image_ref=image_ref,
        year=year,
        context=context,
        description=str(row.get("description", "") or ""),
        city=str(row.get("city", "") or ""),
        nation=str(row.get("nation", "") or ""),
    )


def load_manifest(path: str | Path) -> Catalog:
    """Read a CSV (or JSON-lines) manifest into a validated catalog.

    Bad rows are never dropped silently: each one becomes a :class:`Rejection`
    on the returned catalog. Only whole-file problems raise.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records: list[PhotoRecord] = []
    rejections: list[Rejection] = []
    seen: set[str] = set()
    for lineno, row, error in _iter_manifest_rows(path):
        if row is None:
            rejections.append(Rejection(lineno, "", "unparsable row", error))
            continue
        result = _validate_row(lineno, row)
        if isinstance(result, Rejection):
            rejections.append(result)
        elif result.photo_id in seen:
            rejections.append(Rejection(lineno, result.photo_id, "duplicate photo_id"))
        else:
            seen.add(result.photo_id)
            records.append(result)
    return Catalog(tuple(records), tuple(rejections))


def filter_for_dating(catalog: Catalog, labels: DatingLabelMap = DATING_LABELS) -> Catalog:
    """Keep records whose year falls in the dating interval (both ends inclusive)."""
    return catalog.filter(lambda r: labels.contains(r.year))


def catalog_for_task(catalog: Catalog, task: str) -> Catalog:
    if task == "dating":
        return filter_for_dating(catalog)
    if task == "context":
        return catalog
    raise ValueError(f"unknown task {task!r}")


# -- splits -----------------------------------------------------------------


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Apportion ``total`` items by ``fractions`` with Hamilton's method.

    Ties in the fractional remainder go to the earlier position.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    s = sum(fractions)
    if any(f < 0 for f in fractions) or not math.isclose(s, 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    quotas = [total * f for f in fractions]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class SplitAssignment:
    assignments: Mapping[str, str]
    seed: int
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __getitem__(self, photo_id: str) -> str:
        return self.assignments[photo_id]

    def members(self, name: str) -> list[str]:
        return sorted(p for p, s in self.assignments.items() if s == name)

    def counts(self) -> dict[str, int]:
        c = Counter(self.assignments.values())
        return {s: c.get(s, 0) for s in SPLITS}

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": dict(zip(SPLITS, self.fractions)),
            "counts": self.counts(),
            "assignments": dict(sorted(self.assignments.items())),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "SplitAssignment":
        fr = data["fractions"]
        fractions = tuple(float(fr[s]) for s in SPLITS) if isinstance(fr, Mapping) else tuple(fr)
        return cls(dict(data["assignments"]), int(data["seed"]), fractions)  # type: ignore[arg-type]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitAssignment":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def make_splits(
    catalog: Catalog | Iterable[str],
    seed: int,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
) -> SplitAssignment:
    """Seeded uniform shuffle, then contiguous train/val/test blocks.

    Photo ids are sorted before shuffling so the result depends only on the set
    of ids and the seed, not on manifest order. No stratification.
    """
    ids = sorted(catalog.photo_ids if isinstance(catalog, Catalog) else catalog)
    if len(ids) < 5:
        raise ValueError(f"need at least 5 records to split, got {len(ids)}")
    n_train, n_val, _ = largest_remainder(len(ids), fractions)
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {}
    for rank, i in enumerate(order):
        assignments[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return SplitAssignment(assignments, seed, tuple(fractions))  # type: ignore[arg-type]


def derive_region_split(split: SplitAssignment, crop) -> str:
    """Split of a region crop: always the split of its parent photo."""
    parent = crop if isinstance(crop, str) else crop.parent_id
    try:
        return split.assignments[parent]
    except KeyError:
        raise UnknownParentError(f"crop parent {parent!r} is not in the split assignment") from None


# -- class weights ----------------------------------------------------------


def inverse_frequency_weights(counts: Sequence[int]) -> np.ndarray:
    """Weights proportional to 1/count, normalized to mean 1.

    Classes with zero samples get the largest weight among observed classes
    before normalization.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty 1-D sequence")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    present = counts > 0
    if not present.any():
        raise ValueError("no class has any sample")
    w = np.empty_like(counts)
    w[present] = 1.0 / counts[present]
    w[~present] = w[present].max()
    return w / w.mean()


def class_counts(catalog: Catalog | Iterable[PhotoRecord], task: str) -> np.ndarray:
    counts = np.zeros(num_classes(task), dtype=np.int64)
    for r in catalog:
        counts[r.label(task)] += 1
    return counts


def class_weights(catalog: Catalog | Iterable[PhotoRecord], task: str) -> np.ndarray:
    records = list(catalog)
    if not records:
        raise ValueError("cannot compute class weights of an empty catalog")
    return inverse_frequency_weights(class_counts(records, task))
