"""Blockwise-classification crowd counting.

Count estimation as per-block classification over integer count bins, with
a text-similarity prediction head and an optimal-transport count loss. See
the README for the pipeline overview and CLI usage.
"""

__version__ = "0.1.0"

from .bins import (
    Bin,
    BinPolicy,
    build_bins,
    calibrate_terminal,
    quantize,
    quantize_counts,
    representative,
    validate,
)
from .head import (
    ClassificationCounter,
    EncoderContract,
    RegressionCounter,
    TextEmbeddingBank,
    ToyConvEncoder,
    expected_density,
    interpolate_features,
    load_checkpoint,
    probability_map,
    register_encoder,
    save_checkpoint,
    similarity_logits,
)
from .labels import (
    BlockCountMap,
    PointAnnotation,
    TargetMaps,
    dataset_statistics,
    encode_targets,
    rasterize_points,
)
from .losses import (
    LossBreakdown,
    OTConfig,
    SinkhornResult,
    classification_loss,
    count_loss,
    dace_loss,
    sinkhorn_ot,
)
from .prompts import HashTextEncoder, PromptSet, build_prompt_set, embed_prompts, prompt_for_bin

__all__ = [
    "Bin",
    "BinPolicy",
    "BlockCountMap",
    "ClassificationCounter",
    "EncoderContract",
    "HashTextEncoder",
    "LossBreakdown",
    "OTConfig",
    "PointAnnotation",
    "PromptSet",
    "RegressionCounter",
    "SinkhornResult",
    "TargetMaps",
    "TextEmbeddingBank",
    "ToyConvEncoder",
    "build_bins",
    "build_prompt_set",
    "calibrate_terminal",
    "classification_loss",
    "count_loss",
    "dace_loss",
    "dataset_statistics",
    "embed_prompts",
    "encode_targets",
    "expected_density",
    "interpolate_features",
    "load_checkpoint",
    "probability_map",
    "prompt_for_bin",
    "quantize",
    "quantize_counts",
    "rasterize_points",
    "register_encoder",
    "representative",
    "save_checkpoint",
    "similarity_logits",
    "sinkhorn_ot",
    "validate",
]
