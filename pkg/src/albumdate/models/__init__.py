from .backbones import FAMILIES, VARIANTS, Backbone, BackboneSpec, MissingWeightsError, build_backbone
from .bundle import load_bundle, read_bundle_meta, save_bundle
from .fusion import (
    ALL_BRANCHES,
    FusionError,
    MergedModel,
    aggregate_branch,
    build_merged,
    ensemble_predict,
    merged_forward,
    segment_mean,
    trainable_parameter_count,
)
from .single import BRANCHES, GeometryError, SingleInputModel, batched_scores, build_single, forward_scores

__all__ = [
    "ALL_BRANCHES",
    "BRANCHES",
    "Backbone",
    "BackboneSpec",
    "FAMILIES",
    "FusionError",
    "GeometryError",
    "MergedModel",
    "MissingWeightsError",
    "SingleInputModel",
    "VARIANTS",
    "aggregate_branch",
    "batched_scores",
    "build_backbone",
    "build_merged",
    "build_single",
    "ensemble_predict",
    "forward_scores",
    "load_bundle",
    "merged_forward",
    "read_bundle_meta",
    "save_bundle",
    "segment_mean",
    "trainable_parameter_count",
]
