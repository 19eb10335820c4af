"""Glue between catalog, regions, models and metrics for whole-dataset runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .catalog import Catalog, PhotoRecord, derive_region_split
from .evaluation import PhotoScores, aggregate_photo_vote, build_report
from .imaging import prepare
from .models.fusion import MergedModel, ensemble_predict
from .models.single import SingleInputModel, batched_scores
from .regions import RegionCrop, RegionDatasets
from .training import (
    BranchDataset,
    MergedDataset,
    PhotoSample,
    Sample,
    TrainConfig,
    center_view,
    collate_merged,
    train_merged,
    train_single,
)

logger = logging.getLogger(__name__)

BRANCH_KIND = {"faces": "face", "people": "person"}


def resolve(path: str, root: str | Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or root is None else Path(root) / p


def ordered_crops(regions: RegionDatasets, kind: str) -> dict[str, list[RegionCrop]]:
    """Crops per parent photo, ordered left to right by box center."""
    out = regions.by_parent(kind)
    for crops in out.values():
        crops.sort(key=lambda c: (c.raw_box.center[0], c.crop_id))
    return out


@dataclass
class DataView:
    """Catalog with splits applied plus region crops, ready to feed datasets."""

    catalog: Catalog
    regions: RegionDatasets
    task: str
    image_root: str | Path | None = None

    def __post_init__(self) -> None:
        self.faces = ordered_crops(self.regions, "face")
        self.people = ordered_crops(self.regions, "person")

    def records(self, split: str) -> list[PhotoRecord]:
        return self.catalog.in_split(split)

    def crop_source(self, crop: RegionCrop, record: PhotoRecord):
        if crop.image_ref is not None:
            return crop.image_ref
        from .imaging import load_image

        return load_image(resolve(record.image_ref, self.image_root)).crop(crop.expanded_box)

    def branch_samples(self, branch: str, split: str) -> list[Sample]:
        out = []
        for r in self.records(split):
            label = r.label(self.task)
            if branch == "image":
                out.append(Sample(str(resolve(r.image_ref, self.image_root)), label, split, r.photo_id))
                continue
            for c in (self.faces if branch == "faces" else self.people).get(r.photo_id, []):
                out.append(Sample(self.crop_source(c, r), label, r.split, r.photo_id))
        return out

    def photo_samples(self, split: str) -> list[PhotoSample]:
        return [
            PhotoSample(
                str(resolve(r.image_ref, self.image_root)),
                tuple(self.crop_source(c, r) for c in self.faces.get(r.photo_id, [])),
                tuple(self.crop_source(c, r) for c in self.people.get(r.photo_id, [])),
                r.label(self.task), r.split, r.photo_id,
            )
            for r in self.records(split)
        ]

    def check_leakage(self, split) -> None:
        """Every crop must sit in its parent's split (raises on any violation)."""
        for crops in (self.faces, self.people):
            for parent, cs in crops.items():
                if parent not in self.catalog:
                    continue
                for c in cs:
                    derive_region_split(split, c)


def fit_branch(view: DataView, model: SingleInputModel, config: TrainConfig):
    size = model.input_size
    train = BranchDataset(view.branch_samples(model.branch, "train"), "train", size, config)
    val = BranchDataset(view.branch_samples(model.branch, "val"), "val", size, config)
    logger.info("training %s branch: %d train / %d val samples", model.branch, len(train), len(val))
    return train_single(model, train, val if len(val) else None, config)


def fit_merged(view: DataView, model: MergedModel, config: TrainConfig):
    size = model.input_size
    train = MergedDataset(view.photo_samples("train"), "train", size, config)
    val = MergedDataset(view.photo_samples("val"), "val", size, config)
    return train_merged(model, train, val if len(val) else None, config)


def _eval_tensors(samples, size: int, config: TrainConfig) -> list[torch.Tensor]:
    return [center_view(prepare(s, size), config) for s in samples]


def score_photos(
    view: DataView,
    branches: dict[str, SingleInputModel],
    split: str,
    config: TrainConfig,
) -> dict[str, PhotoScores]:
    """Per-photo probability vectors from each single-input branch model."""
    out = {}
    records = view.records(split)
    image_model = branches["image"]
    size = image_model.input_size
    imgs = _eval_tensors([str(resolve(r.image_ref, view.image_root)) for r in records], size, config)
    image_probs = batched_scores(image_model, imgs)
    crop_probs = {}
    for branch in ("faces", "people"):
        crops = view.faces if branch == "faces" else view.people
        flat = [(r.photo_id, view.crop_source(c, r)) for r in records for c in crops.get(r.photo_id, [])]
        probs = batched_scores(branches[branch], _eval_tensors([s for _, s in flat], size, config))
        per: dict[str, list] = {}
        for (pid, _), p in zip(flat, probs):
            per.setdefault(pid, []).append(p)
        crop_probs[branch] = per
    c = image_model.num_classes
    for r, p in zip(records, image_probs):
        out[r.photo_id] = PhotoScores(
            r.photo_id, r.label(view.task), p,
            np.asarray(crop_probs["faces"].get(r.photo_id, np.zeros((0, c)))),
            np.asarray(crop_probs["people"].get(r.photo_id, np.zeros((0, c)))),
        )
    return out


@torch.no_grad()
def merged_probs(view: DataView, model: MergedModel, split: str, config: TrainConfig, batch_size: int = 32):
    data = MergedDataset(view.photo_samples(split), split, model.input_size, config, train=False)
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        inputs, _ = collate_merged([data[j] for j in range(i, min(i + batch_size, len(data)))])
        out.append(torch.softmax(model(*inputs).double(), dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def branch_predictions(
    scores: dict[str, PhotoScores], crop_level: bool = True,
) -> dict[str, tuple[list[str], np.ndarray, np.ndarray]]:
    """Per-model ``(sample_ids, probabilities, labels)`` for image, faces, people and ensemble.

    Face and people models are scored on their own test sets, one sample per
    crop (ids ``<photo_id>#<j>``). With ``crop_level=False`` they are scored
    per photo instead, averaging the crop vectors of photos that have crops.
    """
    rows = {"image": [], "faces": [], "people": [], "ensemble": []}
    for pid in sorted(scores):
        s = scores[pid]
        rows["image"].append((pid, np.asarray(s.image), s.label))
        for branch in ("faces", "people"):
            crops = getattr(s, branch)
            if not len(crops):
                continue
            if crop_level:
                rows[branch] += [(f"{pid}#{j}", np.asarray(c), s.label) for j, c in enumerate(crops)]
            else:
                mean = np.mean(crops, axis=0)
                rows[branch].append((pid, mean / mean.sum(), s.label))
        rows["ensemble"].append((pid, ensemble_predict(s.image, s.faces, s.people), s.label))
    out = {}
    for name, rs in rows.items():
        if rs:
            out[name] = ([r[0] for r in rs], np.stack([r[1] for r in rs]), np.array([r[2] for r in rs]))
    return out


def photo_vote(scores: PhotoScores, branch: str) -> int:
    return aggregate_photo_vote(getattr(scores, branch))


def reports_for(task: str, predictions: dict, **kwargs) -> dict:
    return {
        name: build_report(task, name, probs, labels, notes={"samples": len(ids)}, **kwargs)
        for name, (ids, probs, labels) in predictions.items()
    }
