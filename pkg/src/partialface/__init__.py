"""Partial-face recognition with attentional pooling and feature aggregation.

The network, losses and training loop run on a small reverse-mode autodiff
layer over numpy (:mod:`partialface.tensor`) in double precision.
"""

__version__ = "0.1.0"

from .aggregate import AggregateParams, BottleneckParams, aggregate, global_pool_baseline
from .attend import RecalibMode, attentional_pool, importance, recalibrate, spatial_softmax
from .backbone import FULL_BACKBONE, TOY_BACKBONE, Backbone, BackboneConfig, BackboneOutput
from .data import Dataset, ToyDatasetConfig, generate_toy_dataset, verification_pairs
from .evaluate import VerificationReport, cosine_distance, embed, evaluate
from .losses import (ClassifierHead, LossWeights, l2_regularizer, mean_ce, total_loss, weighted_ce,
                     weighted_diversity)
from .model import FULL_MODEL, ModelConfig, PartialFaceModel
from .protocol import (CropSpec, LandmarkAnnotation, PairManifest, PartialFace, build_manifest,
                       make_partial, protocol_areas, random_occlusion_augment)
from .tensor import NonFiniteError, ShapeError, Tensor, grad_check
from .train import FULL_FINETUNE, FULL_PRETRAIN, TOY_FINETUNE, TOY_PRETRAIN, TrainConfig, train

__all__ = [
    "AggregateParams", "Backbone", "BackboneConfig", "BackboneOutput", "BottleneckParams",
    "ClassifierHead", "CropSpec", "Dataset", "LandmarkAnnotation", "LossWeights", "ModelConfig",
    "NonFiniteError", "FULL_BACKBONE", "FULL_FINETUNE", "FULL_MODEL", "FULL_PRETRAIN",
    "PairManifest", "PartialFace", "PartialFaceModel", "RecalibMode", "ShapeError", "TOY_BACKBONE",
    "TOY_FINETUNE", "TOY_PRETRAIN", "Tensor", "ToyDatasetConfig", "TrainConfig", "VerificationReport",
    "aggregate", "attentional_pool", "build_manifest", "cosine_distance", "embed", "evaluate",
    "generate_toy_dataset", "global_pool_baseline", "grad_check", "importance", "l2_regularizer",
    "make_partial", "mean_ce", "protocol_areas", "random_occlusion_augment", "recalibrate",
    "spatial_softmax", "total_loss", "train", "verification_pairs", "weighted_ce", "weighted_diversity",
]
