"""Dual student-teacher feature-pyramid distillation for visual anomaly detection.

Two frozen pretrained backbones teach two students: a topology clone
trained from scratch and a decoder that reconstructs normal features from
the coarsest bottleneck, helped by a one-channel attention bridge. Their
per-site feature discrepancies become anomaly maps, composed by
same-resolution sum and cross-resolution product, and a U-Net head trained
on Perlin-noise pseudo-anomalies re-scores the result.
"""

from .config import IMAGENET_MEAN, IMAGENET_STD, TrainConfig, config_fingerprint, load_config
from .data import DatasetIndex, ImageBatch, TestItem, load_batch, load_images, load_mask, normalize_images, scan_mvtec
from .discriminator import (
    FocalLossConfig,
    UNetDiscriminator,
    discriminator_forward,
    focal_loss,
    init_discriminator,
    stack_inputs,
)
from .losses import LossBreakdown, map_loss, normalize_features, pixel_loss, total_loss
from .maps import (
    AnomalyMap,
    compose_final,
    compose_stpm,
    image_score,
    pair_sums,
    site_anomaly_map,
    upsample_map,
)
from .metrics import EvalReport, connected_components, pixel_auroc, pro_curve, pro_score, roc_auc
from .pipeline import (
    Checkpoint,
    StpmModels,
    build_models,
    evaluate,
    export_heatmaps,
    load_checkpoint,
    rebuild_models,
    save_checkpoint,
    train_discriminator,
    train_stpm,
)
from .students import AttentionGate, AttentionMap, Student1Network, Student2Network, init_student1, init_student2
from .synthesis import (
    PseudoAnomalyGenerator,
    PseudoAnomalySample,
    blend,
    generate_mask,
    perlin_field,
    texture_source,
)
from .teachers import FeaturePyramid, TeacherNetwork, extract_pyramid, load_teacher, parameter_checksum

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "AttentionGate",
    "AttentionMap",
    "Checkpoint",
    "DatasetIndex",
    "EvalReport",
    "FeaturePyramid",
    "FocalLossConfig",
    "ImageBatch",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "LossBreakdown",
    "PseudoAnomalyGenerator",
    "PseudoAnomalySample",
    "StpmModels",
    "Student1Network",
    "Student2Network",
    "TeacherNetwork",
    "TestItem",
    "TrainConfig",
    "UNetDiscriminator",
    "blend",
    "build_models",
    "compose_final",
    "compose_stpm",
    "config_fingerprint",
    "connected_components",
    "discriminator_forward",
    "evaluate",
    "export_heatmaps",
    "extract_pyramid",
    "focal_loss",
    "generate_mask",
    "image_score",
    "init_discriminator",
    "init_student1",
    "init_student2",
    "load_batch",
    "load_checkpoint",
    "load_config",
    "load_images",
    "load_mask",
    "load_teacher",
    "map_loss",
    "normalize_features",
    "normalize_images",
    "pair_sums",
    "parameter_checksum",
    "perlin_field",
    "pixel_auroc",
    "pixel_loss",
    "pro_curve",
    "pro_score",
    "rebuild_models",
    "roc_auc",
    "save_checkpoint",
    "scan_mvtec",
    "site_anomaly_map",
    "stack_inputs",
    "texture_source",
    "total_loss",
    "train_discriminator",
    "train_stpm",
    "upsample_map",
]
