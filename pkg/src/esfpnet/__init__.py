"""ESFPNet: Mix-Transformer encoder + efficient stage-wise feature pyramid decoder.

Real-time binary lesion segmentation: model construction and serialization,
the boundary-weighted IoU+BCE objective, the full metric battery, dataset
split protocols, the training loop, frame-stream inference, and analytic
parameter/FLOP accounting.
"""

from .backbone import (DropPath, EfficientSelfAttention, FeaturePyramid,
                       LoadManifest, MixFFN, MixTransformer, OverlapPatchEmbed,
                       TransformerBlock, load_pretrained)
from .complexity import (ComplexityReport, ModuleStat, count_flops,
                         count_parameters, variant_complexity)
from .data import (AugmentConfig, IDENTITY_AUGMENT, PROTOCOLS, Sample,
                   SplitManifest, augment, balanced_sampler, class_weights,
                   load_dataset, load_dataset_root, make_split, preprocess,
                   preprocess_image, preprocess_mask, select_samples)
from .decoder import ESFPDecoder
from .errors import (CheckpointError, ConfigError, EsfpnetError, IngestError,
                     ShapeError, TrainingDiverged)
from .loss import (LossTerms, pixel_weight_map, total_loss, weighted_bce,
                   weighted_iou)
from .metrics import (MetricsReport, PerImageMetrics, classify_frame,
                      compute_image_metrics, dice, e_measure_binary,
                      e_measure_max, iou, mae, s_measure)
from .model import ESFPNet, build, load_model, save_model
from .stream import (CollectingSink, DirectorySink, FrameResult, StreamConfig,
                     ThroughputReport, process_frame, render_overlay, run_stream)
from .trainer import (ExperimentReport, TrainConfig, TrainLogRecord,
                      TrainResult, evaluate, run_protocol, train)
from .variants import (DecoderConfig, EncoderStageConfig, VariantSpec,
                       VARIANT_IDS, get_variant)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "CheckpointError", "CollectingSink", "ComplexityReport",
    "ConfigError", "DecoderConfig", "DirectorySink", "DropPath",
    "ESFPDecoder", "ESFPNet", "EfficientSelfAttention", "EncoderStageConfig",
    "EsfpnetError", "ExperimentReport", "FeaturePyramid", "FrameResult",
    "IDENTITY_AUGMENT", "IngestError", "LoadManifest", "LossTerms",
    "MetricsReport", "MixFFN", "MixTransformer", "ModuleStat",
    "OverlapPatchEmbed", "PROTOCOLS", "PerImageMetrics", "Sample",
    "ShapeError", "SplitManifest", "StreamConfig", "ThroughputReport",
    "TrainConfig", "TrainLogRecord", "TrainResult", "TrainingDiverged",
    "TransformerBlock", "VariantSpec", "VARIANT_IDS", "augment",
    "balanced_sampler", "build", "class_weights", "classify_frame",
    "compute_image_metrics", "count_flops", "count_parameters", "dice",
    "e_measure_binary", "e_measure_max", "evaluate", "get_variant", "iou",
    "load_dataset", "load_dataset_root", "load_model", "load_pretrained",
    "mae", "make_split", "pixel_weight_map", "preprocess", "preprocess_image",
    "preprocess_mask", "process_frame", "render_overlay", "run_protocol",
    "run_stream", "s_measure", "save_model", "select_samples", "total_loss",
    "train", "variant_complexity", "weighted_bce", "weighted_iou",
]
