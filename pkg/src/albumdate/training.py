"""Fine-tuning of single-input classifiers and training of the Merged model.

Recipe: Adam, learning rate 1e-4, weight decay 5e-4, weighted cross-entropy,
random crop + horizontal flip. Batch size 32 for whole images and 64 for
face/person crops. The checkpoint with the best validation accuracy is kept.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .catalog import inverse_frequency_weights
from .imaging import prepare
from .models.fusion import MergedModel

logger = logging.getLogger(__name__)


class LeakageError(RuntimeError):
    """A sample from the wrong split reached a data loader."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    random_crop: bool = True
    horizontal_flip: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    flip_probability: float = 0.5
    seed: int = 0
    class_weights: list[float] | None = None
    cache_frozen_features: bool = True

    def __post_init__(self) -> None:
        self.crop_scale = tuple(self.crop_scale)  # type: ignore[assignment]
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale {self.crop_scale} must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must be in [0, 1]")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be strictly positive")

    @classmethod
    def for_branch(cls, branch: str, **overrides) -> "TrainConfig":
        overrides.setdefault("batch_size", 32 if branch in ("image", "merged") else 64)
        return cls(**overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d


# -- augmentation -----------------------------------------------------------


def _crop_resize(image: torch.Tensor, top: int, left: int, ch: int, cw: int) -> torch.Tensor:
    h, w = image.shape[-2:]
    patch = image[..., top : top + ch, left : left + cw]
    if (ch, cw) == (h, w):
        return patch.clone()
    return F.interpolate(patch.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False)[0]


def _crop_dims(h: int, w: int, scale: float) -> tuple[int, int]:
    side = math.sqrt(scale)
    return max(1, round(h * side)), max(1, round(w * side))


def augment(image: torch.Tensor, config: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random crop covering ``crop_scale`` of the area (resized back), then a random flip."""
    lo, hi = config.crop_scale
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"crop_scale {config.crop_scale} exceeds the image")
    out = image
    if config.random_crop:
        h, w = image.shape[-2:]
        ch, cw = _crop_dims(h, w, rng.uniform(lo, hi))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = _crop_resize(image, top, left, ch, cw)
    if config.horizontal_flip and rng.random() < config.flip_probability:
        out = out.flip(-1)
    return out


def center_view(image: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    """Deterministic evaluation view: centered crop at the mid crop scale, no flip."""
    if not config.random_crop:
        return image
    h, w = image.shape[-2:]
    ch, cw = _crop_dims(h, w, sum(config.crop_scale) / 2)
    return _crop_resize(image, (h - ch) // 2, (w - cw) // 2, ch, cw)


# -- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One training item. ``source`` is a path, PIL image or CHW tensor."""

    source: object
    label: int
    split: str
    group: str = ""


@dataclass(frozen=True)
class PhotoSample:
    source: object
    faces: tuple = ()
    people: tuple = ()
    label: int = 0
    split: str = "train"
    photo_id: str = ""


class _SplitTagged(Dataset):
    def __init__(self, items, split: str, input_size: int, config: TrainConfig | None, train: bool):
        bad = [it for it in items if it.split != split]
        if bad:
            raise LeakageError(f"{len(bad)} samples tagged {sorted({b.split for b in bad})} in a {split!r} dataset")
        if train and split != "train":
            raise LeakageError(f"augmented training view requested for the {split!r} split")
        self.items = list(items)
        self.split = split
        self.input_size = input_size
        self.config = config or TrainConfig()
        self.train = train
        self.epoch = 0
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.items)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _load(self, key, source) -> torch.Tensor:
        t = self._cache.get(key)
        if t is None:
            t = prepare(source, self.input_size)
            self._cache[key] = t
        return t

    def _view(self, t: torch.Tensor, rng: np.random.Generator | None) -> torch.Tensor:
        return augment(t, self.config, rng) if self.train else center_view(t, self.config)

    def _rng(self, index: int) -> np.random.Generator | None:
        if not self.train:
            return None
        return np.random.default_rng([self.config.seed, self.epoch, index])

    @property
    def labels(self) -> list[int]:
        return [it.label for it in self.items]


class BranchDataset(_SplitTagged):
    """Images or crops of one branch, all from one split."""

    def __init__(self, samples: Sequence[Sample], split: str, input_size: int,
                 config: TrainConfig | None = None, train: bool | None = None):
        super().__init__(samples, split, input_size, config, split == "train" if train is None else train)

    def __getitem__(self, index: int):
        it = self.items[index]
        return self._view(self._load(index, it.source), self._rng(index)), it.label


class MergedDataset(_SplitTagged):
    """Whole photos with their face and person crops, all from one split."""

    def __init__(self, samples: Sequence[PhotoSample], split: str, input_size: int,
                 config: TrainConfig | None = None, train: bool | None = None):
        super().__init__(samples, split, input_size, config, split == "train" if train is None else train)

    def __getitem__(self, index: int):
        it = self.items[index]
        rng = self._rng(index)
        image = self._view(self._load((index, "i"), it.source), rng)
        faces = [self._view(self._load((index, "f", j), s), rng) for j, s in enumerate(it.faces)]
        people = [self._view(self._load((index, "p", j), s), rng) for j, s in enumerate(it.people)]
        return image, faces, people, it.label


def collate_merged(batch):
    images = torch.stack([b[0] for b in batch])
    labels = torch.tensor([b[3] for b in batch], dtype=torch.long)
    shape = images.shape[1:]

    def flat(pos):
        crops = [c for b in batch for c in b[pos]]
        owner = [i for i, b in enumerate(batch) for _ in b[pos]]
        tensor = torch.stack(crops) if crops else images.new_zeros((0, *shape))
        return tensor, torch.tensor(owner, dtype=torch.long)

    faces, face_owner = flat(1)
    people, people_owner = flat(2)
    return (images, faces, face_owner, people, people_owner), labels


# -- training loop ----------------------------------------------------------


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def append(self, **record) -> None:
        self.records.append(record)

    def epochs(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]

    def write_jsonl(self, path: str | Path, append: bool = False) -> None:
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainingLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


def weighted_cross_entropy(weights: Sequence[float] | None) -> nn.CrossEntropyLoss:
    w = None if weights is None else torch.as_tensor(np.asarray(weights), dtype=torch.float32)
    return nn.CrossEntropyLoss(weight=w)


def train_class_weights(labels: Sequence[int], num_classes: int) -> list[float]:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    return inverse_frequency_weights(counts).tolist()


def _check_splits(train_data, val_data) -> None:
    if train_data.split != "train":
        raise LeakageError(f"gradient steps requested on the {train_data.split!r} split")
    if val_data is not None and val_data.split != "val":
        raise LeakageError(f"validation requested on the {val_data.split!r} split")
    if len(train_data) == 0:
        raise ValueError("training split is empty")


def _fit(
    model: nn.Module,
    train_data,
    val_data,
    config: TrainConfig,
    num_classes: int,
    forward: Callable,
    collate=None,
    extra_log: Callable[[], dict] | None = None,
) -> tuple[nn.Module, TrainingLog]:
    _check_splits(train_data, val_data)
    weights = config.class_weights
    if weights is None:
        weights = train_class_weights(train_data.labels, num_classes)
    if len(weights) != num_classes:
        raise ValueError(f"{len(weights)} class weights for {num_classes} classes")
    loss_fn = weighted_cross_entropy(weights)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    torch.manual_seed(config.seed)
    loader = DataLoader(
        train_data, batch_size=config.batch_size, shuffle=True, collate_fn=collate,
        generator=torch.Generator().manual_seed(config.seed),
    )
    log = TrainingLog()
    best, best_state, stale = (-1.0, math.inf), None, 0
    extra = extra_log or (lambda: {})

    for epoch in range(1, config.epochs + 1):
        train_data.set_epoch(epoch)
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        for batch_idx, (inputs, labels) in enumerate(loader):
            optimizer.zero_grad(set_to_none=True)
            logits = forward(inputs)
            loss = loss_fn(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch_idx} "
                    f"(lr={config.learning_rate}, logits range "
                    f"[{logits.min().item():.3g}, {logits.max().item():.3g}])"
                )
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(labels)
            correct += (logits.argmax(1) == labels).sum().item()
            seen += len(labels)
        log.append(epoch=epoch, split="train", loss=total_loss / seen, accuracy=correct / seen, **extra())

        if val_data is not None and len(val_data):
            val_loss, val_acc = evaluate_loss(model, val_data, loss_fn, config.batch_size, forward, collate)
            log.append(epoch=epoch, split="val", loss=val_loss, accuracy=val_acc, **extra())
            logger.info("epoch %d: train loss %.4f, val loss %.4f, val acc %.4f",
                        epoch, total_loss / seen, val_loss, val_acc)
            # higher accuracy wins; lower loss breaks accuracy ties
            if val_acc > best[0] or (val_acc == best[0] and val_loss < best[1]):
                best, stale = (val_acc, val_loss), 0
                best_state = copy.deepcopy(model.state_dict())
                log.best_epoch = epoch
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info("early stop after %d epochs without improvement", stale)
                    break
        else:
            log.best_epoch = epoch
            best_state = None

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, log


@torch.no_grad()
def evaluate_loss(model, data, loss_fn, batch_size, forward, collate=None) -> tuple[float, float]:
    model.eval()
    total, correct, seen = 0.0, 0, 0
    for inputs, labels in DataLoader(data, batch_size=batch_size, shuffle=False, collate_fn=collate):
        logits = forward(inputs)
        total += loss_fn(logits, labels).item() * len(labels)
        correct += (logits.argmax(1) == labels).sum().item()
        seen += len(labels)
    return total / seen, correct / seen


def train_single(model, train_data: BranchDataset, val_data: BranchDataset | None, config: TrainConfig):
    """Fine-tune every parameter of a single-input model. Returns ``(model, log)``."""
    return _fit(model, train_data, val_data, config, model.num_classes, model)


class FeatureDataset(Dataset):
    """Precomputed branch features ``(f_image, mean f_faces, mean f_people)`` per photo."""

    def __init__(self, features: torch.Tensor, labels: list[int], split: str):
        self.features = features
        self._labels = list(labels)
        self.split = split

    def __len__(self) -> int:
        return len(self._labels)

    def __getitem__(self, index: int):
        return self.features[index], self._labels[index]

    def set_epoch(self, epoch: int) -> None:
        pass

    @property
    def labels(self) -> list[int]:
        return self._labels


@torch.no_grad()
def precompute_features(model: MergedModel, data: MergedDataset, batch_size: int = 32) -> FeatureDataset:
    """Branch features of every photo on the deterministic evaluation view."""
    view = MergedDataset(data.items, data.split, data.input_size, data.config, train=False)
    model.eval()
    chunks = []
    for i in range(0, len(view), batch_size):
        (images, faces, fo, people, po), _ = collate_merged([view[j] for j in range(i, min(i + batch_size, len(view)))])
        chunks.append(torch.stack(model.branch_features(images, faces, fo, people, po), dim=1))
    feats = torch.cat(chunks) if chunks else torch.zeros(0, 3, model.feature_dim)
    return FeatureDataset(feats, view.labels, view.split)


def train_merged(model: MergedModel, train_data: MergedDataset, val_data: MergedDataset | None,
                 config: TrainConfig):
    """Train the fusion scalars and head (plus backbones when unfrozen).

    With frozen backbones and ``config.cache_frozen_features`` the branch
    features are computed once, without augmentation, and only the fusion
    layer sees repeated epochs. alpha, beta and gamma are logged every epoch.
    """
    _check_splits(train_data, val_data)
    if model.freeze_backbones and config.cache_frozen_features:
        train_feats = precompute_features(model, train_data, config.batch_size)
        val_feats = None if val_data is None else precompute_features(model, val_data, config.batch_size)
        return _fit(
            model, train_feats, val_feats, config, model.num_classes,
            lambda f: model.fuse(f[:, 0], f[:, 1], f[:, 2]), extra_log=model.fusion_weights,
        )
    return _fit(
        model, train_data, val_data, config, model.num_classes, lambda x: model(*x),
        collate=collate_merged, extra_log=model.fusion_weights,
    )
