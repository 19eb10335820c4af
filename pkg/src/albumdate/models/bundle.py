"""On-disk model bundles: ``bundle.json`` metadata plus ``weights.pt`` state dict."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import torch

from .backbones import BackboneSpec, build_backbone
from .fusion import MergedModel
from .single import SingleInputModel

BUNDLE_VERSION = 1


def _meta(model, extra: dict | None) -> dict:
    meta = {
        "format_version": BUNDLE_VERSION,
        "backbone": model.spec.to_dict(),
        "task": model.task,
        "num_classes": model.num_classes,
        "seed": model.seed,
    }
    if isinstance(model, MergedModel):
        meta.update(kind="merged", fusion=model.fusion_weights(), freeze_backbones=model.freeze_backbones)
    else:
        meta.update(kind="single", branch=model.branch)
    meta.update(extra or {})
    return meta


def save_bundle(model: SingleInputModel | MergedModel, directory: str | Path, **extra) -> Path:
    """Write ``model`` to ``directory``; ``extra`` (e.g. ``train_config``) is stored in the metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights.pt")
    (directory / "bundle.json").write_text(json.dumps(_meta(model, extra), indent=2, sort_keys=True) + "\n")
    return directory


def read_bundle_meta(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "bundle.json").read_text())


def load_bundle(directory: str | Path) -> SingleInputModel | MergedModel:
    directory = Path(directory)
    meta = read_bundle_meta(directory)
    if meta.get("format_version") != BUNDLE_VERSION:
        raise ValueError(f"{directory}: unsupported bundle version {meta.get('format_version')}")
    # Weights come from the state dict, never from a download.
    spec = BackboneSpec.from_dict(meta["backbone"])
    build_spec = replace(spec, pretrained=False, weights_path=None)
    if meta["kind"] == "single":
        model = SingleInputModel(spec, meta["task"], meta["branch"], build_backbone(build_spec), meta["seed"])
    else:
        model = MergedModel(
            build_backbone(build_spec), build_backbone(build_spec), build_backbone(build_spec),
            meta["num_classes"], spec=spec, task=meta["task"],
            freeze_backbones=meta["freeze_backbones"], seed=meta["seed"],
        )
    model.load_state_dict(torch.load(directory / "weights.pt", map_location="cpu", weights_only=True))
    model.eval()
    return model
