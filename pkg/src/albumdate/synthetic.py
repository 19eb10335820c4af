"""Synthetic family-album generator so the pipeline can run without private data.

Each photo has a year drawn from a small set and a context class. The year is
encoded redundantly and noisily in three places:

* the whole image: width of a bar along the bottom edge and the print tint;
* faces: hair color;
* people: clothing color.

The context is encoded by a glyph stamped in the upper-left area. Detection
sidecars list the exact head and figure boxes, plus the odd low-confidence
false positive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .catalog import MANIFEST_FIELDS, ContextClass
from .regions import DetectionBox, write_sidecar

DEFAULT_YEARS = tuple(range(1930, 2000, 7))  # 10 years, one in each 7-year step

_GLYPHS = ("circle", "square", "triangle", "cross", "diamond", "ring", "bars", "x", "tee")


@dataclass(frozen=True)
class SyntheticConfig:
    n_photos: int = 1200
    years: tuple[int, ...] = DEFAULT_YEARS
    width: int = 96
    height: int = 72
    max_people: int = 4
    empty_fraction: float = 0.08
    year_noise: float = 0.35  # std of each year cue, in units of the gap between years
    grain: float = 10.0
    false_positive_rate: float = 0.1
    seed: int = 0


def _palette(t: float, start, end) -> tuple[int, int, int]:
    return tuple(int(round(a + (b - a) * t)) for a, b in zip(start, end))


def _glyph(draw: ImageDraw.ImageDraw, kind: str, x: int, y: int, s: int, color) -> None:
    if kind == "circle":
        draw.ellipse([x, y, x + s, y + s], fill=color)
    elif kind == "square":
        draw.rectangle([x, y, x + s, y + s], fill=color)
    elif kind == "triangle":
        draw.polygon([(x + s / 2, y), (x, y + s), (x + s, y + s)], fill=color)
    elif kind == "cross":
        draw.rectangle([x + s / 3, y, x + 2 * s / 3, y + s], fill=color)
        draw.rectangle([x, y + s / 3, x + s, y + 2 * s / 3], fill=color)
    elif kind == "diamond":
        draw.polygon([(x + s / 2, y), (x + s, y + s / 2), (x + s / 2, y + s), (x, y + s / 2)], fill=color)
    elif kind == "ring":
        draw.ellipse([x, y, x + s, y + s], outline=color, width=3)
    elif kind == "bars":
        draw.rectangle([x, y, x + s, y + s / 4], fill=color)
        draw.rectangle([x, y + 3 * s / 4, x + s, y + s], fill=color)
    elif kind == "x":
        draw.line([x, y, x + s, y + s], fill=color, width=3)
        draw.line([x, y + s, x + s, y], fill=color, width=3)
    elif kind == "tee":
        draw.rectangle([x, y, x + s, y + s / 3], fill=color)
        draw.rectangle([x + s / 3, y, x + 2 * s / 3, y + s], fill=color)


def render_photo(year_pos: float, context: ContextClass, n_people: int, cfg: SyntheticConfig,
                 rng: np.random.Generator) -> tuple[Image.Image, list[DetectionBox]]:
    """Draw one photo. ``year_pos`` in [0, 1] is the position of the year in the range.

    Every cue (bar and tint, each hair, each garment) gets its own noise draw.
    """
    w, h = cfg.width, cfg.height
    sigma = cfg.year_noise / max(len(cfg.years) - 1, 1)

    def cue() -> float:
        return float(np.clip(year_pos + rng.normal(0, sigma), 0, 1))

    image_pos = cue()
    tint = _palette(image_pos, (150, 130, 105), (185, 195, 215))
    image = Image.new("RGB", (w, h), tint)
    draw = ImageDraw.Draw(image)

    bar_w = int(round(10 + image_pos * (w - 20)))
    draw.rectangle([0, h - 7, bar_w, h - 1], fill=(30, 30, 30))

    gx, gy = int(rng.integers(3, 14)), int(rng.integers(3, 10))
    _glyph(draw, _GLYPHS[context.index], gx, gy, 14, (20, 20, 60))

    boxes: list[DetectionBox] = []
    slot = (w - 24) / max(n_people, 1)
    for i in range(n_people):
        cx = 24 + slot * (i + 0.5) + rng.uniform(-2, 2)
        head_r = rng.uniform(4.5, 6.0)
        top = rng.uniform(12, 20)
        body_w, body_h = rng.uniform(10, 13), rng.uniform(24, 30)
        hair = _palette(cue(), (240, 200, 60), (40, 20, 10))
        cloth = _palette(cue(), (20, 120, 40), (200, 30, 160))
        head_top = top
        draw.ellipse([cx - head_r, head_top, cx + head_r, head_top + 2 * head_r], fill=(225, 185, 160))
        draw.chord([cx - head_r, head_top, cx + head_r, head_top + 2 * head_r], 180, 360, fill=hair)
        body_top = head_top + 2 * head_r + 1
        draw.rectangle([cx - body_w / 2, body_top, cx + body_w / 2, body_top + body_h], fill=cloth)
        face = DetectionBox(cx - head_r, head_top, 2 * head_r, 2 * head_r, float(rng.uniform(0.6, 1.0)), "face")
        person = DetectionBox(cx - body_w / 2 - 1, head_top - 1, body_w + 2, body_top + body_h - head_top + 2,
                              float(rng.uniform(0.6, 1.0)), "person")
        boxes += [face, person]
    if rng.random() < cfg.false_positive_rate:
        boxes.append(DetectionBox(float(rng.uniform(0, w - 10)), float(rng.uniform(0, h - 10)), 8.0, 8.0,
                                  float(rng.uniform(0.01, 0.2)), "face"))

    arr = np.asarray(image, dtype=np.float64)
    arr += rng.normal(0, cfg.grain, size=arr.shape)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8)), boxes


def generate(out_dir: str | Path, cfg: SyntheticConfig = SyntheticConfig()) -> Path:
    """Write ``images/``, ``detections/`` and ``manifest.csv`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    contexts = list(ContextClass)
    rows = []
    step = 1.0 / max(len(cfg.years) - 1, 1)
    for i in range(cfg.n_photos):
        pid = f"syn{i:05d}"
        j = int(rng.integers(len(cfg.years)))
        context = contexts[int(rng.integers(len(contexts)))]
        n_people = 0 if rng.random() < cfg.empty_fraction else int(rng.integers(1, cfg.max_people + 1))
        image, boxes = render_photo(j * step, context, n_people, cfg, rng)
        rel = f"images/{pid}.png"
        image.save(out / rel)
        write_sidecar(out / "detections", pid, boxes)
        rows.append([pid, rel, cfg.years[j], context.value, f"synthetic photo, {n_people} people", "", ""])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    return manifest
