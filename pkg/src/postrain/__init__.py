"""Channel-attention multi-task post-processing of NWP precipitation forecasts."""

from .backbones import BackboneConfig, build_backbone
from .cam import ChannelAttention, ChannelAttentionConfig, channel_attention
from .config import ExperimentConfig, apply_overrides, load_config, preset, toy
from .dataio import (DatasetManifest, SyntheticSpec, ThresholdSpec, classify_rain,
                     generate_synthetic, load_dataset, resample_grid)
from .multitask import DualPrediction, HybridLossConfig, MultiTaskHeads, hybrid_loss
from .trainer import aggregate_seeds, run_ablation, select_best, train
from .verification import MetricsReport, contingency, evaluate_split

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "ChannelAttention", "ChannelAttentionConfig", "DatasetManifest",
    "DualPrediction", "ExperimentConfig", "HybridLossConfig", "MetricsReport", "MultiTaskHeads",
    "SyntheticSpec", "ThresholdSpec", "aggregate_seeds", "apply_overrides", "build_backbone",
    "channel_attention", "classify_rain", "contingency", "evaluate_split", "generate_synthetic",
    "hybrid_loss", "load_config", "load_dataset", "preset", "resample_grid", "run_ablation",
    "select_best", "toy", "train",
]
