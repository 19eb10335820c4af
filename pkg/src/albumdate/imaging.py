"""Image loading and geometry helpers shared by training, evaluation and explanation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_image(path: str | Path) -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB")


def letterbox(image: Image.Image, size: int, fill: tuple[int, int, int] = (0, 0, 0)) -> Image.Image:
    """Resize to fit a ``size`` x ``size`` square without distortion, padding the rest."""
    w, h = image.size
    scale = size / max(w, h)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    resized = image.resize((nw, nh), Image.BILINEAR)
    canvas = Image.new("RGB", (size, size), fill)
    canvas.paste(resized, ((size - nw) // 2, (size - nh) // 2))
    return canvas


def to_tensor(image: Image.Image) -> torch.Tensor:
    """HWC uint8 image -> CHW float32 tensor in [0, 1]."""
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def to_uint8(tensor: torch.Tensor) -> np.ndarray:
    """CHW tensor in [0, 1] -> HWC uint8 array."""
    arr = tensor.detach().clamp(0, 1).mul(255).round().to(torch.uint8).numpy()
    return arr.transpose(1, 2, 0)


def prepare(source, size: int) -> torch.Tensor:
    """Path, PIL image or CHW tensor -> letterboxed CHW tensor of the given size."""
    if isinstance(source, torch.Tensor):
        if source.shape[-2:] == (size, size):
            return source
        source = Image.fromarray(to_uint8(source))
    elif not isinstance(source, Image.Image):
        source = load_image(source)
    return to_tensor(letterbox(source, size))
