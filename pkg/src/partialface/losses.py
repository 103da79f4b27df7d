"""Training objective: (weighted) cross-entropy, weighted diversity, L2."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .attend import spatial_softmax
from .tensor import Tensor


@dataclass
class ClassifierHead:
    """One ``D x num_classes`` layer shared by every per-map feature."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator | None = None) -> "ClassifierHead":
        # zero start: every class equally likely, whatever the feature scale
        w = np.zeros((dim, num_classes))
        return cls(Tensor(w, requires_grad=True, name="head.w"),
                   Tensor(np.zeros(num_classes), requires_grad=True, name="head.b"))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def __call__(self, f: Tensor) -> Tensor:
        return T.fully_connected(f, self.weight, self.bias)


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    div: float = 1.0
    reg: float = 5e-5

    def __post_init__(self):
        if min(self.ce, self.div, self.reg) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


def _labels(label, num_classes: int) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(label))
    if lab.dtype.kind not in "iu" or np.any(lab < 0) or np.any(lab >= num_classes):
        raise ValueError(f"invalid class label(s) {label!r} for {num_classes} classes")
    return lab


def per_map_ce(f_k: Tensor, label, head: ClassifierHead) -> Tensor:
    """Negative log-likelihood of ``label`` for each map: ``[N x] K``."""
    lab = _labels(label, head.num_classes)
    logp = T.log_softmax(head(f_k), axis=-1)
    if f_k.ndim == 2:
        if lab.size != 1:
            raise ValueError("per_map_ce: one label expected for unbatched features")
        return -logp[:, int(lab[0])]
    if lab.shape != (f_k.shape[0],):
        raise T.ShapeError(f"per_map_ce: {lab.shape[0]} labels for a batch of {f_k.shape[0]}")
    n, K = f_k.shape[:2]
    return -logp[np.arange(n)[:, None], np.arange(K)[None, :], lab[:, None]]


def weighted_ce(f_k, s, label, head: ClassifierHead) -> Tensor:
    """``sum_k s_k * CE_k``, averaged over the batch when batched."""
    f_k = f_k if isinstance(f_k, Tensor) else Tensor(f_k)
    s = s if isinstance(s, Tensor) else Tensor(s)
    ce = per_map_ce(f_k, label, head)
    if s.shape != ce.shape:
        raise T.ShapeError(f"weighted_ce: importance {s.shape} vs per-map losses {ce.shape}")
    per_item = T.sum(T.mul(ce, s), axis=-1)
    return T.mean(per_item) if per_item.ndim else per_item


def mean_ce(f_k, label, head: ClassifierHead) -> Tensor:
    f_k = f_k if isinstance(f_k, Tensor) else Tensor(f_k)
    return T.mean(per_map_ce(f_k, label, head))


def single_ce(f, label, head: ClassifierHead) -> Tensor:
    """Cross-entropy of one feature per item (no per-map heads)."""
    f = f if isinstance(f, Tensor) else Tensor(f)
    lab = _labels(label, head.num_classes)
    logp = T.log_softmax(head(f), axis=-1)
    if f.ndim == 1:
        return -logp[int(lab[0])]
    return T.mean(-logp[np.arange(f.shape[0]), lab])


def diversity_map(A) -> Tensor:
    return spatial_softmax(A if isinstance(A, Tensor) else Tensor(A))


def weighted_diversity(A, s) -> Tensor:
    """``1 - sum_ij max_k s_k P_ijk``; batch mean when batched.

    Ties in the max send the subgradient to the lowest k.
    """
    A = A if isinstance(A, Tensor) else Tensor(A)
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.shape != A.shape[:-3] + (A.shape[-1],):
        raise T.ShapeError(f"weighted_diversity: importance {s.shape} vs maps {A.shape}")
    P = diversity_map(A)
    scaled = T.mul(P, T.reshape(s, s.shape[:-1] + (1, 1, s.shape[-1])))
    covered = T.sum(T.max(scaled, axis=-1), axis=(-2, -1))
    loss = 1.0 - covered
    return T.mean(loss) if loss.ndim else loss


def is_regularized(name: str, include_biases: bool = False) -> bool:
    if name.endswith(".w"):
        return True
    return include_biases and name.endswith(".b")


def l2_regularizer(params: Mapping[str, Tensor], include_biases: bool = False) -> Tensor:
    """Sum of squared entries of every conv / fully connected weight."""
    terms: Iterable[Tensor] = [T.sum(T.mul(p, p)) for name, p in params.items()
                               if is_regularized(name, include_biases)]
    total = Tensor(0.0)
    for t in terms:
        total = T.add(total, t)
    return total


@dataclass
class LossTerms:
    ce: Tensor
    div: Tensor
    reg: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"ce_term": self.ce.item(), "div_term": self.div.item(),
                "reg_term": self.reg.item(), "total": self.total.item()}


def combine(ce: Tensor, div: Tensor, reg: Tensor, weights: LossWeights) -> LossTerms:
    total = T.add(T.add(T.mul(ce, weights.ce), T.mul(div, weights.div)), T.mul(reg, weights.reg))
    return LossTerms(ce, div, reg, total)


def total_loss(batch, model, weights: LossWeights, stage: str = "pretrain",
               rng: np.random.Generator | None = None, train: bool = True) -> LossTerms:
    """Weighted sum of the classification, diversity and L2 terms for one batch.

    ``batch`` is ``(images, labels)``.  ``pretrain`` averages the per-map
    cross-entropies; ``finetune`` weights them by importance when the model
    is configured for it.
    """
    if stage not in ("pretrain", "finetune"):
        raise ValueError(f"unknown training stage {stage!r}")
    images, labels = batch
    out = model.forward(images, train=train, rng=rng)
    head = model.head
    if out.f_k is None:
        ce = single_ce(out.f, labels, head)
    elif stage == "finetune" and model.config.weighted_ce:
        ce = weighted_ce(out.f_k, out.s, labels, head)
    else:
        ce = mean_ce(out.f_k, labels, head)
    div = weighted_diversity(out.A, out.s)
    reg = l2_regularizer(model.params, model.config.l2_include_biases)
    return combine(ce, div, reg, weights)
