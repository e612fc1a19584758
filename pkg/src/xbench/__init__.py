"""Saliency explanations and faithfulness benchmarks for transformer image classifiers."""

from .adapters import (
    AttentionStack,
    BackboneFamily,
    BackboneSpec,
    CaptureBundle,
    TrainConfig,
    TransformerAdapter,
    WindowLayout,
    build_adapter,
    default_spec,
    tiny_spec,
)
from .data import (
    DatasetSplit,
    ImageCollection,
    ImageSample,
    load_busi,
    load_pbc,
    preprocess,
    sample_eval_subset,
    split,
)
from .explainers import (
    HeadFusion,
    RolloutConfig,
    SaliencyMap,
    SaliencyMethod,
    attention_rollout,
    augment_attention,
    grad_cam,
    gradient_attention_rollout,
    normalize_map,
    rollout_vector,
)
from .faithfulness import (
    BaselineKind,
    BaselineSpec,
    Direction,
    FaithfulnessCurve,
    PixelOrdering,
    aggregate_curves,
    faithfulness_curve,
    perturb_sequence,
    rank_pixels,
)
from .runner import ExperimentConfig, ExperimentRunner, ReportBundle, explain_image, load_config

__version__ = "0.1.0"

__all__ = [
    "AttentionStack",
    "BackboneFamily",
    "BackboneSpec",
    "BaselineKind",
    "BaselineSpec",
    "CaptureBundle",
    "DatasetSplit",
    "Direction",
    "ExperimentConfig",
    "ExperimentRunner",
    "FaithfulnessCurve",
    "HeadFusion",
    "ImageCollection",
    "ImageSample",
    "PixelOrdering",
    "ReportBundle",
    "RolloutConfig",
    "SaliencyMap",
    "SaliencyMethod",
    "TrainConfig",
    "TransformerAdapter",
    "WindowLayout",
    "aggregate_curves",
    "attention_rollout",
    "augment_attention",
    "build_adapter",
    "default_spec",
    "explain_image",
    "faithfulness_curve",
    "grad_cam",
    "gradient_attention_rollout",
    "load_busi",
    "load_config",
    "load_pbc",
    "normalize_map",
    "perturb_sequence",
    "preprocess",
    "rank_pixels",
    "rollout_vector",
    "sample_eval_subset",
    "split",
    "tiny_spec",
]
