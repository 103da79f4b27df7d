"""Desk-scale end-to-end experiment: two-stage training on the toy faces,
then holistic and partial-cross verification on held-out identities' images."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, ToyDatasetConfig, generate_toy_dataset, verification_pairs
from .evaluate import VerificationReport, evaluate
from .model import ModelConfig, PartialFaceModel, to_input
from .protocol import build_manifest
from .train import TOY_FINETUNE, TOY_PRETRAIN, TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyResult:
    recalib: str
    seed: int
    holistic: float
    cross_centered: float
    cross_report: VerificationReport
    final_loss: float


def train_two_stage(model: PartialFaceModel, data: Dataset, seed: int,
                    pretrain: TrainConfig = TOY_PRETRAIN, finetune: TrainConfig = TOY_FINETUNE,
                    calibrate_images: int = 100) -> float:
    """Pretrain then finetune ``model`` in place; returns the last total loss.

    With ``calibrate_images > 0`` the affine layers are first fitted to that
    many randomly chosen training images.
    """
    if calibrate_images > 0:
        pick = np.random.default_rng(seed).choice(len(data), min(calibrate_images, len(data)), replace=False)
        model.calibrate(to_input(data.images[pick]))
    train(model, data, replace(pretrain, seed=seed))
    trace = train(model, data, replace(finetune, seed=seed))
    return trace[-1]["total"] if trace else float("nan")


def run_toy_experiment(recalib: str = "softmax_sigmoid", seed: int = 0,
                       data: ToyDatasetConfig = ToyDatasetConfig(), n_pairs: int = 150,
                       calibrate_images: int = 100) -> ToyResult:
    ds = generate_toy_dataset(data)
    train_split, test_split = ds.subset("train"), ds.subset("test")
    model = PartialFaceModel.build(ModelConfig(recalib=recalib, num_classes=ds.num_classes), seed)
    loss = train_two_stage(model, train_split, seed, calibrate_images=calibrate_images)

    pairs = verification_pairs(test_split, n_pairs, n_pairs, seed=0)
    images = dict(zip(test_split.paths, test_split.images))
    landmarks = test_split.landmark_map()
    # full-area pairs of the holistic protocol are plain face-to-face verification
    holistic = evaluate(model, build_manifest(pairs, "partial-holistic", ["nose"], areas=[100.0]),
                        images.__getitem__, landmarks)
    cross = evaluate(model, build_manifest(pairs, "partial-cross", placement="centered"),
                     images.__getitem__, landmarks)
    result = ToyResult(recalib, seed, holistic.mean_accuracy(), cross.mean_accuracy(), cross, loss)
    log.info("%s seed %d: holistic %.4f cross %.4f", recalib, seed, result.holistic, result.cross_centered)
    return result
