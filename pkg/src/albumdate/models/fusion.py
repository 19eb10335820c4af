"""Multi-input fusion: score-level Ensemble and feature-level Merged model."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..catalog import num_classes as task_classes
from .backbones import Backbone, BackboneSpec
from .single import GeometryError, Normalize, SingleInputModel

ALL_BRANCHES = frozenset({"image", "faces", "people"})


class FusionError(ValueError):
    pass


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def aggregate_branch(vectors: Sequence[Sequence[float]], normalize: bool = True) -> np.ndarray:
    """Element-wise mean of equal-length vectors, L1-renormalized when ``normalize``.

    Use ``normalize=False`` for feature vectors or logits.
    """
    if len(vectors) == 0:
        raise FusionError("cannot aggregate an empty list of vectors")
    lengths = {len(v) for v in vectors}
    if len(lengths) != 1:
        raise FusionError(f"ragged vectors: lengths {sorted(lengths)}")
    mean = np.mean(np.asarray(vectors, dtype=np.float64), axis=0)
    if normalize:
        total = mean.sum()
        if total <= 0:
            raise FusionError("cannot L1-normalize a vector with non-positive sum")
        mean = mean / total
    return mean


def ensemble_predict(
    photo_scores: Sequence[float] | None,
    face_scores: Sequence[Sequence[float]],
    people_scores: Sequence[Sequence[float]],
    include: frozenset[str] | set[str] = ALL_BRANCHES,
    from_logits: bool = False,
) -> np.ndarray:
    """Average per-branch score vectors into one probability vector.

    Each branch is first reduced to one vector (crops averaged), then the
    included branches that have data are averaged. Branches without data
    (no detections) drop out of the mean. With ``from_logits`` the inputs are
    raw logits, averaged unnormalized and passed through a softmax at the end.
    """
    unknown = set(include) - ALL_BRANCHES
    if unknown:
        raise FusionError(f"unknown branches {sorted(unknown)}")
    norm = not from_logits
    parts = []
    if "image" in include and photo_scores is not None:
        parts.append(aggregate_branch([photo_scores], norm))
    if "faces" in include and len(face_scores):
        parts.append(aggregate_branch(face_scores, norm))
    if "people" in include and len(people_scores):
        parts.append(aggregate_branch(people_scores, norm))
    if not parts:
        raise FusionError(f"no data in any included branch {sorted(include)}")
    fused = aggregate_branch(parts, norm)
    return _softmax(fused) if from_logits else fused


def segment_mean(features: torch.Tensor, owner: torch.Tensor, n: int) -> torch.Tensor:
    """Mean of ``features`` rows grouped by ``owner`` index; empty groups give zeros."""
    out = features.new_zeros(n, features.shape[1])
    if features.shape[0] == 0:
        return out
    out.index_add_(0, owner, features)
    counts = torch.bincount(owner, minlength=n).clamp(min=1).to(features.dtype)
    return out / counts.unsqueeze(1)


class MergedModel(nn.Module):
    """Three branch backbones, learnable scalars alpha/beta/gamma and a fresh head.

    The fused feature is ``alpha*f_image + beta*mean(f_faces) + gamma*mean(f_people)``;
    a branch with no crops contributes a zero vector.
    """

    def __init__(
        self,
        image_backbone: Backbone,
        face_backbone: Backbone,
        people_backbone: Backbone,
        num_classes: int,
        *,
        spec: BackboneSpec | None = None,
        task: str | None = None,
        freeze_backbones: bool = True,
        init_weight: float = 1.0 / 3.0,
        seed: int = 0,
    ):
        super().__init__()
        dims = {b.feature_dim for b in (image_backbone, face_backbone, people_backbone)}
        if len(dims) != 1:
            raise FusionError(f"branch feature dims differ: {sorted(dims)}")
        self.spec = spec
        self.task = task
        self.seed = seed
        self.num_classes = num_classes
        self.feature_dim = dims.pop()
        self.normalize = Normalize()
        self.image_backbone = image_backbone
        self.face_backbone = face_backbone
        self.people_backbone = people_backbone
        self.alpha = nn.Parameter(torch.tensor(float(init_weight)))
        self.beta = nn.Parameter(torch.tensor(float(init_weight)))
        self.gamma = nn.Parameter(torch.tensor(float(init_weight)))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.head = nn.Linear(self.feature_dim, num_classes)
        self.freeze_backbones = freeze_backbones
        self.set_frozen(freeze_backbones)

    @property
    def backbones(self) -> tuple[Backbone, Backbone, Backbone]:
        return self.image_backbone, self.face_backbone, self.people_backbone

    @property
    def input_size(self) -> int | None:
        return None if self.spec is None else self.spec.input_size

    def set_frozen(self, frozen: bool) -> None:
        self.freeze_backbones = frozen
        for b in self.backbones:
            for p in b.parameters():
                p.requires_grad_(not frozen)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_backbones:
            for b in self.backbones:
                b.eval()
        return self

    def fusion_weights(self) -> dict[str, float]:
        return {"alpha": self.alpha.item(), "beta": self.beta.item(), "gamma": self.gamma.item()}

    def fuse(self, f_image: torch.Tensor, f_faces: torch.Tensor, f_people: torch.Tensor) -> torch.Tensor:
        return self.head(self.alpha * f_image + self.beta * f_faces + self.gamma * f_people)

    def _check(self, x: torch.Tensor, what: str) -> None:
        s = self.input_size
        if s is not None and x.shape[0] and tuple(x.shape[1:]) != (3, s, s):
            raise GeometryError(f"{what}: expected (N, 3, {s}, {s}), got {tuple(x.shape)}")

    def forward(
        self,
        images: torch.Tensor,
        faces: torch.Tensor,
        face_owner: torch.Tensor,
        people: torch.Tensor,
        people_owner: torch.Tensor,
    ) -> torch.Tensor:
        """Logits for a batch of photos; crops are flat tensors tagged with their photo index."""
        return self.fuse(*self.branch_features(images, faces, face_owner, people, people_owner))

    def branch_features(self, images, faces, face_owner, people, people_owner):
        """``(f_image, mean f_faces, mean f_people)``, each of shape (batch, feature_dim)."""
        self._check(images, "images")
        self._check(faces, "faces")
        self._check(people, "people")
        n = images.shape[0]
        f_img = self.image_backbone(self.normalize(images))
        f_faces = self._crop_features(self.face_backbone, faces, face_owner, n, f_img)
        f_people = self._crop_features(self.people_backbone, people, people_owner, n, f_img)
        return f_img, f_faces, f_people

    def _crop_features(self, backbone, crops, owner, n, like):
        if crops.shape[0] == 0:
            return like.new_zeros(n, self.feature_dim)
        return segment_mean(backbone(self.normalize(crops)), owner, n)


def build_merged(
    image_model: SingleInputModel,
    face_model: SingleInputModel,
    people_model: SingleInputModel,
    task: str | None = None,
    *,
    freeze_backbones: bool = True,
    seed: int = 0,
) -> MergedModel:
    """Strip the heads off three trained branch models and fuse their backbones."""
    models = (image_model, face_model, people_model)
    families = {m.spec.family for m in models}
    variants = {m.spec.variant for m in models}
    if len(families) != 1 or len(variants) != 1:
        raise FusionError(f"branch backbones must share one family, got {sorted(families | variants)}")
    tasks = {m.task for m in models} | ({task} if task else set())
    if len(tasks) != 1:
        raise FusionError(f"branch models disagree on task: {sorted(tasks)}")
    task = tasks.pop()
    return MergedModel(
        copy.deepcopy(image_model.backbone),
        copy.deepcopy(face_model.backbone),
        copy.deepcopy(people_model.backbone),
        task_classes(task),
        spec=image_model.spec,
        task=task,
        freeze_backbones=freeze_backbones,
        seed=seed,
    )


def _stack(crops: Sequence[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if len(crops) == 0:
        return like.new_zeros((0, *like.shape))
    return torch.stack(list(crops))


@torch.no_grad()
def merged_forward(
    model: MergedModel,
    photo: torch.Tensor,
    face_crops: Sequence[torch.Tensor],
    people_crops: Sequence[torch.Tensor],
) -> np.ndarray:
    """Probability vector for one photo and its (possibly empty) crop lists."""
    was_training = model.training
    model.eval()
    try:
        faces = _stack(face_crops, photo)
        people = _stack(people_crops, photo)
        logits = model(
            photo.unsqueeze(0),
            faces, torch.zeros(len(faces), dtype=torch.long),
            people, torch.zeros(len(people), dtype=torch.long),
        )
    finally:
        model.train(was_training)
    return torch.softmax(logits.double(), dim=1)[0].numpy()


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
