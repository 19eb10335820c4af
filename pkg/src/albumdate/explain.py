"""Grad-CAM heatmaps and overlays for single-input models."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .models.single import SingleInputModel


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    target_class: int
    predicted_class: int
    probabilities: np.ndarray
    branch: str
    all_zero: bool = False


def gradcam(model: SingleInputModel, image: torch.Tensor, target_class: int | None = None) -> Heatmap:
    """Gradient-weighted class activation map of the final convolutional stage.

    ``target_class`` defaults to the predicted class. A vanishing gradient or
    activation field yields an all-zero map with ``all_zero`` set and a warning.
    """
    x = model.check_geometry(image)
    if x.shape[0] != 1:
        raise ValueError("gradcam takes a single image")
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            maps = model.forward_maps(x.detach())
            maps.retain_grad()
            logits = model.head(F.adaptive_avg_pool2d(maps, 1).flatten(1))
            probs = torch.softmax(logits.detach().double(), dim=1)[0].numpy()
            predicted = int(np.argmax(probs))
            target = predicted if target_class is None else int(target_class)
            if not 0 <= target < model.num_classes:
                raise ValueError(f"target class {target} outside [0, {model.num_classes})")
            (grads,) = torch.autograd.grad(logits[0, target], maps)
    finally:
        model.train(was_training)

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * maps.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0].double().numpy()
    lo, hi = cam.min(), cam.max()
    if not np.isfinite(hi) or hi - lo <= 1e-12 * max(1.0, abs(hi)):
        warnings.warn("Grad-CAM field is flat (zero gradients or activations); returning an all-zero heatmap")
        return Heatmap(np.zeros_like(cam), target, predicted, probs, model.branch, all_zero=True)
    return Heatmap((cam - lo) / (hi - lo), target, predicted, probs, model.branch)


def _as_uint8(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().clamp(0, 1).mul(255).round().to(torch.uint8).numpy().transpose(1, 2, 0)
    elif isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    return np.asarray(image, dtype=np.uint8)


def overlay(heatmap: Heatmap | np.ndarray, image, opacity: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Alpha-blend the color-mapped heatmap onto ``image``; returns HxWx3 uint8."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    base = _as_uint8(image)
    if base.shape[:2] != values.shape:
        raise ValueError(f"heatmap {values.shape} and image {base.shape[:2]} differ in geometry")
    if not 0 <= opacity <= 1:
        raise ValueError("opacity must be in [0, 1]")
    colored = (colormaps[cmap](np.clip(values, 0, 1))[..., :3] * 255).round()
    blended = (1 - opacity) * base.astype(np.float64) + opacity * colored
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def write_explanation(
    out_dir: str | Path,
    name: str,
    heatmap: Heatmap,
    image,
    *,
    photo_id: str,
    true_class: int | None = None,
    class_names: list[str] | None = None,
    opacity: float = 0.5,
) -> tuple[Path, Path]:
    """Save ``<name>.png`` overlay and ``<name>.json`` sidecar with the probability histogram."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png = out / f"{name}.png"
    Image.fromarray(overlay(heatmap, image, opacity)).save(png)
    sidecar = {
        "photo_id": photo_id,
        "branch": heatmap.branch,
        "target_class": heatmap.target_class,
        "predicted_class": heatmap.predicted_class,
        "true_class": true_class,
        "all_zero": heatmap.all_zero,
        "probabilities": [float(p) for p in heatmap.probabilities],
    }
    if class_names is not None:
        sidecar["class_names"] = class_names
    js = out / f"{name}.json"
    js.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return png, js
