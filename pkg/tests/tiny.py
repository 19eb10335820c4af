"""Small stand-in backbones for fast, exact model tests."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from albumdate.models import Backbone, BackboneSpec, MergedModel, SingleInputModel


class TinyBackbone(Backbone):
    """3x3 conv to ``dim`` channels, ReLU, 4x downsample."""

    def __init__(self, dim: int = 6, seed: int = 0):
        super().__init__()
        self.feature_dim = dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.conv = nn.Conv2d(3, dim, 3, padding=1)

    def forward_maps(self, x):
        return F.avg_pool2d(F.relu(self.conv(x)), 4)


class ProjectedBackbone(Backbone):
    """Wraps a backbone and projects its maps to ``dim`` channels (reduced-dimension tests)."""

    def __init__(self, inner: Backbone, dim: int, seed: int = 0):
        super().__init__()
        self.inner = inner
        self.feature_dim = dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.proj = nn.Conv2d(inner.feature_dim, dim, 1)

    def forward_maps(self, x):
        return self.proj(self.inner.forward_maps(x))


class QuadrantBackbone(Backbone):
    """Four channels; channel q carries the image intensity inside quadrant q only.

    Quadrants are numbered 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    Every channel also sees a uniform background so the maps are never flat.
    """

    feature_dim = 4

    def __init__(self, size: int = 64, cells: int = 8):
        super().__init__()
        self.cells = cells
        masks = torch.zeros(4, cells, cells)
        h = cells // 2
        masks[0, :h, :h] = masks[1, :h, h:] = masks[2, h:, :h] = masks[3, h:, h:] = 1
        self.register_buffer("masks", masks.unsqueeze(0))
        self.dummy = nn.Parameter(torch.ones(()))

    def forward_maps(self, x):
        intensity = F.adaptive_avg_pool2d(x.mean(dim=1, keepdim=True), self.cells) + 3.0  # > 0 after normalization
        return self.dummy * intensity * self.masks


def tiny_merged(num_classes: int = 5, dim: int = 6, seed: int = 0, freeze: bool = True) -> MergedModel:
    return MergedModel(TinyBackbone(dim, seed), TinyBackbone(dim, seed + 1), TinyBackbone(dim, seed + 2),
                       num_classes, freeze_backbones=freeze, seed=seed)


def quadrant_model(quadrant: int, num_classes: int = 9) -> SingleInputModel:
    """Context model whose class ``quadrant`` logit reads only that quadrant's channel."""
    model = SingleInputModel(BackboneSpec("densenet121", "compact"), "context", "image", QuadrantBackbone())
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
        model.head.weight[quadrant, quadrant] = 1.0
    return model.eval()


def quadrant_mass(values, quadrant: int) -> float:
    """Share of the heatmap's total mass inside ``quadrant``."""
    h, w = values.shape
    rows = slice(0, h // 2) if quadrant < 2 else slice(h // 2, h)
    cols = slice(0, w // 2) if quadrant % 2 == 0 else slice(w // 2, w)
    return float(values[rows, cols].sum() / values.sum())
