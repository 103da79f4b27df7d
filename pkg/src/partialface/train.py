"""Mini-batch Adam training for the two-stage recipe (holistic pretrain, partial finetune)."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import Dataset
from .losses import LossWeights, total_loss
from .model import PartialFaceModel, to_input
from .protocol import random_occlusion_augment
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "ce_term", "div_term", "reg_term", "total", "lr")
TRACE_HEADER = "# partialface-loss-trace v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 20
    batch_size: int = 50
    initial_lr: float = 0.05
    lr_decay_factor: float = 4.0
    lr_decay_every_epochs: int = 6
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    occlusion_prob: float = 0.8
    occlusion_min_area: float = 0.1
    occlusion_max_area: float = 1.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.initial_lr < 0:
            raise ValueError(f"invalid training config {self}")
        if self.lr_decay_every_epochs < 1 or self.lr_decay_factor <= 0:
            raise ValueError("lr decay needs a positive factor and period")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.initial_lr / self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


FULL_PRETRAIN = TrainConfig("pretrain", epochs=20, batch_size=50, initial_lr=0.05,
                             lr_decay_factor=4.0, lr_decay_every_epochs=6)
FULL_FINETUNE = TrainConfig("finetune", epochs=5, batch_size=50, initial_lr=0.002,
                             lr_decay_factor=4.0, lr_decay_every_epochs=2)
TOY_PRETRAIN = TrainConfig("pretrain", epochs=10, batch_size=32, initial_lr=2e-3,
                           lr_decay_factor=4.0, lr_decay_every_epochs=4)
TOY_FINETUNE = TrainConfig("finetune", epochs=4, batch_size=32, initial_lr=5e-4,
                           lr_decay_factor=4.0, lr_decay_every_epochs=2)


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def augment(images: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    """Flip, brightness/contrast jitter and (finetune only) random rectangular occlusion."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        x = img[:, ::-1] if rng.random() < config.flip_prob else img
        x = x.astype(np.float64)
        c = 1.0 + rng.uniform(-config.contrast, config.contrast)
        b = 255.0 * rng.uniform(-config.brightness, config.brightness)
        x = np.clip(np.rint((x - 127.5) * c + 127.5 + b), 0, 255).astype(np.uint8)
        if config.stage == "finetune":
            x = random_occlusion_augment(x, rng, config.occlusion_prob,
                                         config.occlusion_min_area, config.occlusion_max_area).image
        out[i] = x
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(model: PartialFaceModel, dataset: Dataset, config: TrainConfig,
          loss_weights: LossWeights = LossWeights(), trace_path: str | Path | None = None) -> list[dict]:
    """Train ``model`` in place; returns the loss trace (one dict per step).

    Runs are reproducible for a fixed ``config.seed``.  Steps continue from
    ``model.step`` so traces of resumed runs keep increasing.
    """
    rng = np.random.default_rng([config.seed, 101])
    drop_rng = np.random.default_rng([config.seed, 202])
    opt = Adam(model.params, config.beta1, config.beta2, config.eps)
    trace: list[dict] = []
    fh = writer = None
    if trace_path is not None:
        trace_path = Path(trace_path)
        fresh = not trace_path.exists() or trace_path.stat().st_size == 0
        fh = open(trace_path, "a", newline="", encoding="utf-8")
        if fresh:
            fh.write(TRACE_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(TRACE_COLUMNS)
    try:
        done = 0
        for epoch in range(config.epochs):
            lr = config.lr_at_epoch(epoch)
            for idx in batches(len(dataset), config.batch_size, rng):
                if config.max_steps is not None and done >= config.max_steps:
                    return trace
                images = to_input(augment(dataset.images[idx], rng, config))
                labels = dataset.labels[idx]
                step = model.step + 1
                try:
                    terms = total_loss((images, labels), model, loss_weights, config.stage,
                                       rng=drop_rng, train=True)
                    for p in model.params.values():
                        p.grad = None
                    terms.total.backward()
                    opt.step(lr)
                except NonFiniteError as e:
                    raise TrainingDiverged(step, str(e)) from None
                for name, p in model.params.items():
                    if not np.all(np.isfinite(p.data)):
                        raise TrainingDiverged(step, f"parameter {name} became non-finite")
                model.step = step
                done += 1
                row = {"step": step, **terms.values(), "lr": lr}
                trace.append(row)
                if writer is not None:
                    writer.writerow([row[c] for c in TRACE_COLUMNS])
                if step % 20 == 0:
                    log.info("step %d epoch %d lr %.2e loss %.4f (ce %.4f div %.4f)", step, epoch, lr,
                             row["total"], row["ce_term"], row["div_term"])
        return trace
    finally:
        if fh is not None:
            fh.close()


def read_trace(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(rows)
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in reader]
