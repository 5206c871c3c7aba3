"""Question-guided visual cropping from exported model internals.

The package turns cross-attention maps and gradients exported by a
multimodal language model (see exchange for the on-disk format) into
importance maps over image patches, selects a square crop worth a second
look, and measures how attention and accuracy relate to visual concept
size.
"""

from .attention import (
    answer_to_image,
    default_layer_choice,
    grad_weighted_attention,
    head_average,
    layer_average,
    relative_attention,
    relative_layer_maps,
)
from .analysis import (
    RatioStat,
    attention_ratio,
    exact_match,
    mean_ci,
    normalize_answer,
    size_partition,
    vqa_score,
)
from .cropper import (
    DEFAULT_MULTIPLIERS,
    crop_and_resize,
    expand_to_square,
    resize_bilinear,
    select_bbox,
    stitch_maps,
    tile_blocks,
)
from .datatypes import AVERAGED, BBox, CropDirective, EvalRecord, ImportanceMap, LayerChoice
from .estimators import CropSelector, ImportanceMapper, make_crop_pipeline
from .exchange import (
    AttentionBundle,
    RunManifest,
    TensorSpec,
    build_manifest,
    load_bundle,
    read_records,
    write_bundle,
    write_records,
)
from .saliency import edge_mask, grad_magnitude, pool_to_patches, pure_grad_importance
from .validation import PairInputs

__version__ = "0.1.0"

__all__ = [
    "AVERAGED",
    "AttentionBundle",
    "BBox",
    "CropDirective",
    "CropSelector",
    "DEFAULT_MULTIPLIERS",
    "EvalRecord",
    "ImportanceMap",
    "ImportanceMapper",
    "LayerChoice",
    "PairInputs",
    "RatioStat",
    "RunManifest",
    "TensorSpec",
    "answer_to_image",
    "attention_ratio",
    "build_manifest",
    "crop_and_resize",
    "default_layer_choice",
    "edge_mask",
    "exact_match",
    "expand_to_square",
    "grad_magnitude",
    "grad_weighted_attention",
    "head_average",
    "layer_average",
    "load_bundle",
    "make_crop_pipeline",
    "mean_ci",
    "normalize_answer",
    "pool_to_patches",
    "pure_grad_importance",
    "read_records",
    "relative_attention",
    "relative_layer_maps",
    "resize_bilinear",
    "select_bbox",
    "size_partition",
    "stitch_maps",
    "tile_blocks",
    "vqa_score",
    "write_bundle",
    "write_records",
]
