"""Metrics, report assembly and the k-of-n face/person ablation.

Tie rule used everywhere: among equal scores the lowest class index wins.
Dating predictions are the argmax year class.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .catalog import DATING_LABELS, DatingLabelMap, num_classes as task_classes

DEFAULT_DISTANCES = (0, 5, 10)
DEFAULT_KS = (1, 2, 3, 4, 5)
ABLATION_VARIANTS = (
    ("faces", False),
    ("faces", True),
    ("people", False),
    ("people", True),
    ("both", False),
    ("both", True),
)


class ReportAuditError(AssertionError):
    pass


def variant_name(kind: str, with_image: bool) -> str:
    return f"{kind} {'w/' if with_image else 'w/o'} image"


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred)
    t = np.asarray(true)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"predictions and truths must be equal-length 1-D sequences, got {p.shape} and {t.shape}")
    if p.size == 0:
        raise ValueError("no samples to evaluate")
    return p, t


def time_distance_accuracy(pred_years: Sequence[int], true_years: Sequence[int], d: int) -> float:
    """Fraction of predictions within ``d`` years of the truth."""
    if d < 0:
        raise ValueError(f"time distance must be >= 0, got {d}")
    p, t = _pair(pred_years, true_years)
    return float(np.mean(np.abs(p.astype(np.int64) - t.astype(np.int64)) <= d))


def mean_abs_error(pred_years: Sequence[int], true_years: Sequence[int]) -> tuple[float, float]:
    """Mean and population standard deviation of the absolute year error."""
    p, t = _pair(pred_years, true_years)
    err = np.abs(p.astype(np.float64) - t.astype(np.float64))
    return float(err.mean()), float(err.std(ddof=0))


def ranked_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending score; stable, so lower indices win ties."""
    return np.argsort(-np.asarray(probs, dtype=np.float64), axis=-1, kind="stable")


def topk_accuracy(prob_vectors: Sequence[Sequence[float]], true_labels: Sequence[int], k: int) -> float:
    probs = np.asarray(prob_vectors, dtype=np.float64)
    labels = np.asarray(true_labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0] or probs.shape[0] == 0:
        raise ValueError("need a non-empty (N, C) score matrix and N labels")
    if not 1 <= k <= probs.shape[1]:
        raise ValueError(f"k={k} outside [1, {probs.shape[1]}]")
    top = ranked_classes(probs)[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def argmax_lowest(vector: Sequence[float]) -> int:
    return int(np.argmax(np.asarray(vector)))  # numpy returns the first maximum


def aggregate_photo_vote(prob_vectors: Sequence[Sequence[float]]) -> int:
    """One prediction from many crops: argmax of the mean probability vector."""
    if len(prob_vectors) == 0:
        raise ValueError("no probability vectors to vote with")
    return argmax_lowest(np.mean(np.asarray(prob_vectors, dtype=np.float64), axis=0))


def confusion_matrix(preds: Sequence[int], truths: Sequence[int], num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    p, t = np.asarray(preds, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError("predictions and truths differ in length")
    for name, arr in (("prediction", p), ("truth", t)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} label outside [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def per_decade_accuracy(
    pred_years: Sequence[int], true_years: Sequence[int], labels: DatingLabelMap = DATING_LABELS
) -> dict[int, tuple[float, int]]:
    """Exact-year accuracy and sample count per decade of the true year (empty decades omitted)."""
    p, t = _pair(pred_years, true_years)
    for y in t:
        if not labels.contains(int(y)):
            raise ValueError(f"year {int(y)} outside the dating range")
    out = {}
    decades = (t // 10) * 10
    for dec in sorted(set(decades.tolist())):
        mask = decades == dec
        out[int(dec)] = (float(np.mean(p[mask] == t[mask])), int(mask.sum()))
    return out


# -- fixed-n subset and ablation -------------------------------------------


@dataclass
class PhotoScores:
    """Branch score vectors for one photo. Crop rows are in a fixed left-to-right order."""

    photo_id: str
    label: int
    image: np.ndarray | None
    faces: np.ndarray
    people: np.ndarray

    def __post_init__(self) -> None:
        self.faces = np.asarray(self.faces, dtype=np.float64).reshape(-1, self._dim())
        self.people = np.asarray(self.people, dtype=np.float64).reshape(-1, self._dim())

    def _dim(self) -> int:
        for v in (self.image, self.faces, self.people):
            a = None if v is None else np.asarray(v)
            if a is not None and a.size:
                return a.shape[-1]
        return 1


def select_fixed_n(
    photo_ids: Sequence[str],
    face_counts: Mapping[str, int],
    people_counts: Mapping[str, int],
    n: int,
    mode: str = "all",
) -> list[str]:
    """Photos with exactly ``n`` faces and (``mode="all"``) or (``mode="any"``) ``n`` people."""
    if mode not in ("all", "any"):
        raise ValueError(f"mode must be 'all' or 'any', got {mode!r}")
    out = []
    for pid in photo_ids:
        hits = (face_counts.get(pid, 0) == n, people_counts.get(pid, 0) == n)
        if all(hits) if mode == "all" else any(hits):
            out.append(pid)
    return out


@dataclass
class AblationTable:
    n: int
    rows: dict[int, dict[str, float]]
    subset_counts: list[int]
    photo_counts: dict[str, int]

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "subset_counts": self.subset_counts,
            "photo_counts": self.photo_counts,
            "rows": {str(k): v for k, v in sorted(self.rows.items())},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "AblationTable":
        return cls(int(d["n"]), {int(k): dict(v) for k, v in d["rows"].items()},
                   list(d["subset_counts"]), dict(d["photo_counts"]))


def _l1(x: np.ndarray) -> np.ndarray:
    return x / x.sum(axis=-1, keepdims=True)


def kofn_ablation(subset: Sequence[PhotoScores], n: int) -> AblationTable:
    """Exact-year ensemble accuracy using k of the n faces/people, for k = 1..n.

    Every one of the C(n, k) crop subsets of every photo is scored and the
    results averaged. "both" variants use the same index subset for faces and
    people. A variant only counts photos with exactly n crops of each kind it uses.
    """
    if not subset:
        raise ValueError("ablation subset is empty: no test photo has the requested number of faces/people")
    if n < 1:
        raise ValueError("n must be >= 1")
    rows: dict[int, dict[str, float]] = {}
    photo_counts: dict[str, int] = {}
    counts = [math.comb(n, k) for k in range(1, n + 1)]
    for k in range(1, n + 1):
        combos = np.array(list(itertools.combinations(range(n), k)), dtype=np.int64)
        rows[k] = {}
        for kind, with_image in ABLATION_VARIANTS:
            name = variant_name(kind, with_image)
            needs = ("faces", "people") if kind == "both" else (kind,)
            hits, total = 0, 0
            for ph in subset:
                if any(len(getattr(ph, b)) != n for b in needs):
                    continue
                if with_image and ph.image is None:
                    continue
                parts = [_l1(getattr(ph, b)[combos].mean(axis=1)) for b in needs]
                if with_image:
                    parts.append(np.broadcast_to(_l1(np.asarray(ph.image, dtype=np.float64)), parts[0].shape))
                fused = _l1(np.mean(parts, axis=0))
                hits += int(np.sum(np.argmax(fused, axis=1) == ph.label))
                total += len(combos)
            photo_counts[name] = total // len(combos)
            rows[k][name] = hits / total if total else float("nan")
    return AblationTable(n, rows, counts, photo_counts)


# -- reports ----------------------------------------------------------------


@dataclass
class EvaluationReport:
    task: str
    model_id: str
    n_samples: int
    exact_accuracy: float
    topk: dict[int, float]
    confusion: np.ndarray
    accuracy_at: dict[int, float] = field(default_factory=dict)
    mean_error: tuple[float, float] | None = None
    per_decade: dict[int, tuple[float, int]] = field(default_factory=dict)
    ablation: AblationTable | None = None
    notes: dict = field(default_factory=dict)

    def audit(self) -> None:
        """Raise :class:`ReportAuditError` if a structural invariant is violated."""
        ds = sorted(self.accuracy_at)
        for a, b in zip(ds, ds[1:]):
            if self.accuracy_at[b] < self.accuracy_at[a]:
                raise ReportAuditError(f"{self.model_id}: accuracy at d={b} below d={a}")
        ks = sorted(self.topk)
        for a, b in zip(ks, ks[1:]):
            if self.topk[b] < self.topk[a]:
                raise ReportAuditError(f"{self.model_id}: top-{b} below top-{a}")
        total = int(self.confusion.sum())
        if total != self.n_samples:
            raise ReportAuditError(f"{self.model_id}: confusion total {total} != {self.n_samples} samples")
        trace_acc = float(np.trace(self.confusion)) / total
        if abs(trace_acc - self.exact_accuracy) > 1e-9:
            raise ReportAuditError(f"{self.model_id}: confusion trace/total {trace_acc} != exact accuracy")
        if 0 in self.accuracy_at and abs(self.accuracy_at[0] - self.exact_accuracy) > 1e-9:
            raise ReportAuditError(f"{self.model_id}: d=0 accuracy disagrees with exact accuracy")
        if 1 in self.topk and abs(self.topk[1] - self.exact_accuracy) > 1e-9:
            raise ReportAuditError(f"{self.model_id}: top-1 accuracy disagrees with exact accuracy")

    def to_json(self) -> dict:
        d = {
            "task": self.task,
            "model_id": self.model_id,
            "n_samples": self.n_samples,
            "exact_accuracy": self.exact_accuracy,
            "topk": {str(k): v for k, v in sorted(self.topk.items())},
            "confusion": self.confusion.tolist(),
            "accuracy_at": {str(k): v for k, v in sorted(self.accuracy_at.items())},
            "mean_error": None if self.mean_error is None else list(self.mean_error),
            "per_decade": {str(k): list(v) for k, v in sorted(self.per_decade.items())},
            "ablation": None if self.ablation is None else self.ablation.to_json(),
            "notes": self.notes,
        }
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "EvaluationReport":
        return cls(
            task=d["task"],
            model_id=d["model_id"],
            n_samples=int(d["n_samples"]),
            exact_accuracy=float(d["exact_accuracy"]),
            topk={int(k): v for k, v in d["topk"].items()},
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            accuracy_at={int(k): v for k, v in d.get("accuracy_at", {}).items()},
            mean_error=None if d.get("mean_error") is None else tuple(d["mean_error"]),
            per_decade={int(k): (v[0], int(v[1])) for k, v in d.get("per_decade", {}).items()},
            ablation=None if d.get("ablation") is None else AblationTable.from_json(d["ablation"]),
            notes=dict(d.get("notes", {})),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvaluationReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_report(
    task: str,
    model_id: str,
    probs: np.ndarray,
    labels: Sequence[int],
    *,
    distances: Sequence[int] = DEFAULT_DISTANCES,
    ks: Sequence[int] = DEFAULT_KS,
    notes: dict | None = None,
) -> EvaluationReport:
    """Compute every metric for one model from per-photo probability vectors."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = task_classes(task)
    if probs.ndim != 2 or probs.shape[1] != c:
        raise ValueError(f"expected (N, {c}) probabilities, got {probs.shape}")
    preds = np.argmax(probs, axis=1)
    report = EvaluationReport(
        task=task,
        model_id=model_id,
        n_samples=len(labels),
        exact_accuracy=float(np.mean(preds == labels)),
        topk={k: topk_accuracy(probs, labels, k) for k in ks if k <= c},
        confusion=confusion_matrix(preds, labels, c),
        notes=dict(notes or {}),
    )
    if task == "dating":
        py = preds + DATING_LABELS.year_min
        ty = labels + DATING_LABELS.year_min
        report.accuracy_at = {d: time_distance_accuracy(py, ty, d) for d in distances}
        report.mean_error = mean_abs_error(py, ty)
        report.per_decade = per_decade_accuracy(py, ty)
    report.audit()
    return report
