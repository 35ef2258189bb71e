"""Infrared/visible image fusion: model, objective, metrics, and tooling."""

from .autograd import FinitenessError, ShapeMismatchError, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .images import (GrayImage, ImageFormatError, ImagePair, PatchSet,
                     load_corpus, load_gray, random_patches, save_gray)
from .losses import LossBreakdown, LossConfig, PartitionMasks, total_loss
from .metrics import MetricReport, metric_report
from .model import AtfuseModel, ModelConfig, TokenGrid, fuse_images
from .optim import AdamW, MissingGradError
from .trainer import TrainAbort, TrainConfig, TrainLogRecord, lr_at_epoch, train

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AtfuseModel", "CheckpointError", "FinitenessError", "GrayImage",
    "ImageFormatError", "ImagePair", "LossBreakdown", "LossConfig",
    "MetricReport", "MissingGradError", "ModelConfig", "PartitionMasks",
    "PatchSet", "ShapeMismatchError", "Tensor", "TokenGrid", "TrainAbort",
    "TrainConfig", "TrainLogRecord", "fuse_images", "load_checkpoint",
    "load_corpus", "load_gray", "lr_at_epoch", "metric_report",
    "random_patches", "save_checkpoint", "save_gray", "total_loss", "train",
]
