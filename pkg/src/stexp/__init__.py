"""Contrastive patch/spot joint embedding for spatial gene-expression prediction."""

from .contrastive import Checkpoint, TrainConfig, clip_loss, fit, similarity
from .data import GenConfig, ProcessedDataset, Slide, load_dataset, load_slide, preprocess, synth_generate
from .encoders import EncoderConfig
from .evaluation import MetricsRecord, ari, compute_metrics, kmeans, loocv, pca
from .inference import RetrievalIndex, aggregate, build_index, predict_slide, query_topk

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "EncoderConfig",
    "GenConfig",
    "MetricsRecord",
    "ProcessedDataset",
    "RetrievalIndex",
    "Slide",
    "TrainConfig",
    "aggregate",
    "ari",
    "build_index",
    "clip_loss",
    "compute_metrics",
    "fit",
    "kmeans",
    "load_dataset",
    "load_slide",
    "loocv",
    "pca",
    "predict_slide",
    "preprocess",
    "query_topk",
    "similarity",
    "synth_generate",
]
