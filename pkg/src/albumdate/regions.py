"""Face and person detection, adaptive cropping and the derived region datasets."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from PIL import Image

logger = logging.getLogger(__name__)

KINDS = ("face", "person")
DEFAULT_CONFIDENCE_FLOOR = 0.25

# Linear expansion schedule: E_MAX for a lone subject, E_MIN from N_REF subjects up.
E_MAX = 1.6
E_MIN = 1.1
N_REF = 10


class DetectionError(RuntimeError):
    def __init__(self, photo_id: str, message: str):
        super().__init__(f"{photo_id}: {message}")
        self.photo_id = photo_id


class DegenerateCropError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    w: float
    h: float
    confidence: float
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown detection kind {self.kind!r}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def intersects(self, width: int, height: int) -> bool:
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0


@dataclass(frozen=True)
class RegionCrop:
    crop_id: str
    parent_id: str
    kind: str
    raw_box: DetectionBox
    expanded_box: tuple[int, int, int, int]  # (left, top, right, bottom), exclusive right/bottom
    n_in_photo: int
    image_ref: str | None = None

    def to_dict(self) -> dict:
        return {
            "crop_id": self.crop_id,
            "parent_id": self.parent_id,
            "kind": self.kind,
            "raw_box": asdict(self.raw_box),
            "expanded_box": list(self.expanded_box),
            "n_in_photo": self.n_in_photo,
            "path": self.image_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionCrop":
        return cls(
            crop_id=d["crop_id"],
            parent_id=d["parent_id"],
            kind=d["kind"],
            raw_box=DetectionBox(**d["raw_box"]),
            expanded_box=tuple(d["expanded_box"]),  # type: ignore[arg-type]
            n_in_photo=int(d["n_in_photo"]),
            image_ref=d.get("path"),
        )


class DetectorPort(Protocol):
    """Anything that returns raw detections of one kind for one photo."""

    def detect(self, image: Image.Image, kind: str, photo_id: str) -> list[DetectionBox]: ...


class SidecarDetector:
    """Deterministic detector reading ``<root>/<photo_id>.json`` sidecar files.

    Sidecar layout::

        {"detections": [{"kind": "face", "x": 10, "y": 4, "w": 12, "h": 12, "confidence": 0.9}, ...]}

    A missing sidecar means no detections.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def detect(self, image: Image.Image, kind: str, photo_id: str) -> list[DetectionBox]:
        path = self.root / f"{photo_id}.json"
        if not path.exists():
            return []
        data = json.loads(path.read_text(encoding="utf-8"))
        return [
            DetectionBox(
                x=float(d["x"]), y=float(d["y"]), w=float(d["w"]), h=float(d["h"]),
                confidence=float(d["confidence"]), kind=d["kind"],
            )
            for d in data.get("detections", [])
            if d["kind"] == kind
        ]


def write_sidecar(root: str | Path, photo_id: str, boxes: Iterable[DetectionBox]) -> Path:
    path = Path(root) / f"{photo_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"detections": [asdict(b) for b in boxes]}, indent=1) + "\n", encoding="utf-8")
    return path


class StaticDetector:
    """In-memory detector for tests: ``{photo_id: [DetectionBox, ...]}``."""

    def __init__(self, boxes: dict[str, Sequence[DetectionBox]]):
        self.boxes = boxes

    def detect(self, image: Image.Image, kind: str, photo_id: str) -> list[DetectionBox]:
        return [b for b in self.boxes.get(photo_id, ()) if b.kind == kind]


class OpenCVDetector:
    """Pretrained OpenCV detectors: Haar cascade for faces, HOG+SVM for people.

    Raw detector scores are mapped to [0, 1] with a logistic so they can share
    the confidence floor with other adapters.
    """

    def __init__(self, face_scale: float = 1.1, min_neighbors: int = 4):
        import cv2  # optional dependency

        self._cv2 = cv2
        self._faces = cv2.CascadeClassifier(cv2.data.haarcascades + "haarcascade_frontalface_default.xml")
        self._hog = cv2.HOGDescriptor()
        self._hog.setSVMDetector(cv2.HOGDescriptor_getDefaultPeopleDetector())
        self.face_scale = face_scale
        self.min_neighbors = min_neighbors

    def detect(self, image: Image.Image, kind: str, photo_id: str) -> list[DetectionBox]:
        import numpy as np

        cv2 = self._cv2
        arr = np.asarray(image.convert("RGB"))[:, :, ::-1].copy()
        if kind == "face":
            gray = cv2.cvtColor(arr, cv2.COLOR_BGR2GRAY)
            rects, _, weights = self._faces.detectMultiScale3(
                gray, scaleFactor=self.face_scale, minNeighbors=self.min_neighbors, outputRejectLevels=True
            )
        else:
            rects, weights = self._hog.detectMultiScale(arr, winStride=(8, 8))
        out = []
        for (x, y, w, h), s in zip(rects, np.ravel(weights) if len(rects) else []):
            conf = 1.0 / (1.0 + math.exp(-float(s)))
            out.append(DetectionBox(float(x), float(y), float(w), float(h), conf, kind))
        return out


def detect(
    image: Image.Image,
    kind: str,
    detector: DetectorPort,
    photo_id: str = "",
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
) -> list[DetectionBox]:
    """Run ``detector`` and keep boxes above the floor, most confident first."""
    if kind not in KINDS:
        raise ValueError(f"unknown detection kind {kind!r}")
    try:
        boxes = detector.detect(image, kind, photo_id)
    except Exception as exc:
        raise DetectionError(photo_id, f"{kind} detector failed: {exc}") from exc
    width, height = image.size
    kept = [
        b for b in boxes
        if b.kind == kind and b.confidence >= confidence_floor and b.intersects(width, height)
    ]
    return sorted(kept, key=lambda b: -b.confidence)


def expansion_factor(n: int, e_max: float = E_MAX, e_min: float = E_MIN, n_ref: int = N_REF) -> float:
    """Crop scale for a photo holding ``n`` same-kind detections.

    Linear from ``e_max`` at one subject down to ``e_min`` at ``n_ref`` and beyond.
    """
    if n < 1:
        raise ValueError(f"detection count must be >= 1, got {n}")
    t = (min(n, n_ref) - 1) / (n_ref - 1)
    return e_max - (e_max - e_min) * t


def expand_box(box: DetectionBox, n: int, width: int, height: int) -> tuple[int, int, int, int]:
    """Scale ``box`` about its center, then clip to the image.

    Faces expand to a square on the longer side; people keep their aspect ratio.
    Origins are floored and extents ceiled so no detected pixel is lost.
    """
    f = expansion_factor(n)
    cx, cy = box.center
    if box.kind == "face":
        new_w = new_h = f * max(box.w, box.h)
    else:
        new_w, new_h = f * box.w, f * box.h
    left = max(0, math.floor(cx - new_w / 2))
    top = max(0, math.floor(cy - new_h / 2))
    right = min(width, math.ceil(cx + new_w / 2))
    bottom = min(height, math.ceil(cy + new_h / 2))
    if right <= left or bottom <= top:
        raise DegenerateCropError(f"expanded box {(left, top, right, bottom)} has no area inside {width}x{height}")
    return left, top, right, bottom


def adaptive_crop(
    image: Image.Image,
    box: DetectionBox,
    n: int,
    *,
    parent_id: str,
    crop_id: str,
    out_dir: str | Path | None = None,
) -> RegionCrop:
    """Expand ``box`` for a photo with ``n`` subjects and optionally write the crop.

    When ``out_dir`` is given the crop is saved as ``<out_dir>/<crop_id>.png``
    and its path recorded in ``image_ref``.
    """
    expanded = expand_box(box, n, *image.size)
    image_ref = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{crop_id}.png"
        image.crop(expanded).save(path)
        image_ref = str(path)
    return RegionCrop(crop_id, parent_id, box.kind, box, expanded, n, image_ref)


@dataclass
class RegionDatasets:
    faces: list[RegionCrop] = field(default_factory=list)
    people: list[RegionCrop] = field(default_factory=list)
    no_region: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def crops(self, kind: str) -> list[RegionCrop]:
        return self.faces if kind == "face" else self.people

    def by_parent(self, kind: str) -> dict[str, list[RegionCrop]]:
        out: dict[str, list[RegionCrop]] = {}
        for c in self.crops(kind):
            out.setdefault(c.parent_id, []).append(c)
        return out

    def counts(self, photo_id: str) -> tuple[int, int]:
        return (
            sum(c.parent_id == photo_id for c in self.faces),
            sum(c.parent_id == photo_id for c in self.people),
        )

    def to_json(self) -> dict:
        return {
            "settings": self.settings,
            "crops": [c.to_dict() for c in self.faces + self.people],
            "no_region": sorted(self.no_region),
            "failures": dict(sorted(self.failures.items())),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, data: dict) -> "RegionDatasets":
        crops = [RegionCrop.from_dict(d) for d in data["crops"]]
        return cls(
            faces=[c for c in crops if c.kind == "face"],
            people=[c for c in crops if c.kind == "person"],
            no_region=list(data.get("no_region", [])),
            failures=dict(data.get("failures", {})),
            settings=dict(data.get("settings", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RegionDatasets":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _process_photo(record, image_root, detector, out_dir, confidence_floor):
    path = Path(record.image_ref)
    if image_root is not None and not path.is_absolute():
        path = Path(image_root) / path
    try:
        with Image.open(path) as im:
            image = im.convert("RGB")
    except Exception as exc:
        raise DetectionError(record.photo_id, f"cannot decode image {path}: {exc}") from exc
    crops: dict[str, list[RegionCrop]] = {}
    for kind in KINDS:
        boxes = detect(image, kind, detector, record.photo_id, confidence_floor)
        kind_dir = None if out_dir is None else Path(out_dir) / kind
        crops[kind] = [
            adaptive_crop(
                image, b, len(boxes),
                parent_id=record.photo_id, crop_id=f"{record.photo_id}__{kind}{i:02d}", out_dir=kind_dir,
            )
            for i, b in enumerate(boxes)
        ]
    return crops


def build_region_datasets(
    catalog,
    detector: DetectorPort,
    *,
    image_root: str | Path | None = None,
    out_dir: str | Path | None = None,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    max_workers: int = 1,
) -> RegionDatasets:
    """Detect and crop faces and people for every photo in ``catalog``.

    Per-photo failures are collected in ``failures`` rather than aborting the
    batch. Photos are processed concurrently when ``max_workers > 1``; results
    are merged in catalog order, so the index is identical either way.
    """
    records = list(catalog)
    logger.info("region extraction: %d photos, confidence floor %.2f", len(records), confidence_floor)

    def work(record):
        try:
            return record, _process_photo(record, image_root, detector, out_dir, confidence_floor), None
        except (DetectionError, DegenerateCropError) as exc:
            return record, None, str(exc)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(r) for r in records]

    out = RegionDatasets(
        settings={
            "confidence_floor": confidence_floor,
            "expansion": {"e_max": E_MAX, "e_min": E_MIN, "n_ref": N_REF},
            "count_source": "same-kind",
        }
    )
    for record, crops, error in results:
        if error is not None:
            out.failures[record.photo_id] = error
            continue
        out.faces.extend(crops["face"])
        out.people.extend(crops["person"])
        if not crops["face"] and not crops["person"]:
            out.no_region.append(record.photo_id)
    logger.info(
        "region extraction: %d faces, %d people, %d photos without regions, %d failures",
        len(out.faces), len(out.people), len(out.no_region), len(out.failures),
    )
    return out
