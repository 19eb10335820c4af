"""Single-input classifiers: one backbone plus a fresh linear head."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..catalog import num_classes as task_classes
from ..imaging import IMAGENET_MEAN, IMAGENET_STD
from .backbones import Backbone, BackboneSpec, build_backbone

BRANCHES = ("image", "faces", "people")


class GeometryError(ValueError):
    pass


class Normalize(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class SingleInputModel(nn.Module):
    """Backbone + linear head. Inputs are letterboxed RGB tensors in [0, 1]."""

    def __init__(self, spec: BackboneSpec, task: str, branch: str, backbone: Backbone, seed: int = 0):
        super().__init__()
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
        self.spec = spec
        self.task = task
        self.branch = branch
        self.seed = seed
        self.num_classes = task_classes(task)
        self.normalize = Normalize()
        self.backbone = backbone
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.head = nn.Linear(backbone.feature_dim, self.num_classes)

    @property
    def input_size(self) -> int:
        return self.spec.input_size

    def check_geometry(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        s = self.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise GeometryError(f"expected input of shape (N, 3, {s}, {s}), got {tuple(x.shape)}")
        return x

    def forward_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone.forward_maps(self.normalize(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.normalize(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def build_single(spec: BackboneSpec, task: str, branch: str = "image", seed: int = 0) -> SingleInputModel:
    """Backbone per ``spec`` and a randomly initialized head sized for ``task``.

    All randomly initialized parameters are drawn under ``seed``, so two calls
    with equal arguments yield identical models.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = build_backbone(spec)
        return SingleInputModel(spec, task, branch, backbone, seed)


@torch.no_grad()
def forward_scores(model: SingleInputModel, image: torch.Tensor) -> np.ndarray:
    """Softmax probabilities for one image (1-D result) or a batch (2-D result)."""
    single = image.dim() == 3
    x = model.check_geometry(image)
    was_training = model.training
    model.eval()
    try:
        probs = torch.softmax(model(x).double(), dim=1).numpy()
    finally:
        model.train(was_training)
    return probs[0] if single else probs


@torch.no_grad()
def batched_scores(model: SingleInputModel, images: list[torch.Tensor], batch_size: int = 64) -> np.ndarray:
    if not images:
        return np.zeros((0, model.num_classes))
    return np.concatenate(
        [forward_scores(model, torch.stack(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    )
