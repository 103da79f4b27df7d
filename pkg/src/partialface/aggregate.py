"""Per-map bottleneck layers and the mean embedding, plus the single-map baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attend import attentional_pool
from .tensor import Tensor


@dataclass
class AggregateParams:
    """K unshared bottlenecks: ``weight`` is ``K x C x D`` and ``bias`` is ``K x D``."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, K: int, channels: int, dim: int, rng: np.random.Generator,
             fan_in: int | None = None) -> "AggregateParams":
        w = rng.normal(0.0, np.sqrt(2.0 / (fan_in or channels)), size=(K, channels, dim))
        return cls(Tensor(w, requires_grad=True, name="agg.w"),
                   Tensor(np.zeros((K, dim)), requires_grad=True, name="agg.b"))

    @property
    def K(self) -> int:
        return self.weight.shape[0]


@dataclass
class BottleneckParams:
    """A single ``C x D`` bottleneck used by the no-aggregate baseline."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, channels: int, dim: int, rng: np.random.Generator,
             fan_in: int | None = None) -> "BottleneckParams":
        w = rng.normal(0.0, np.sqrt(2.0 / (fan_in or channels)), size=(channels, dim))
        return cls(Tensor(w, requires_grad=True, name="bneck.w"),
                   Tensor(np.zeros(dim), requires_grad=True, name="bneck.b"))


def aggregate(v, params: AggregateParams, keep_prob: float = 1.0,
              rng: np.random.Generator | None = None, train: bool = False) -> tuple[Tensor, Tensor]:
    """Map descriptors ``[N x] K x C`` to per-map features ``f_k`` and their mean ``f``.

    Dropout with ``keep_prob`` is applied to the descriptors in train mode.
    """
    v = v if isinstance(v, Tensor) else Tensor(v)
    K, C, _ = params.weight.shape
    if v.ndim not in (2, 3) or v.shape[-2:] != (K, C):
        raise T.ShapeError(f"aggregate: descriptors {v.shape} do not match weights {params.weight.shape}")
    v = T.dropout(v, keep_prob, rng, train)
    spec = "kc,kcd->kd" if v.ndim == 2 else "nkc,kcd->nkd"
    f_k = T.add(T.einsum(spec, v, params.weight), params.bias)
    return f_k, T.mean(f_k, axis=-2)


def global_pool_baseline(F, A_tilde, params: BottleneckParams, keep_prob: float = 1.0,
                         rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Average the K maps into one, pool ``F`` with it and apply one bottleneck."""
    A_tilde = A_tilde if isinstance(A_tilde, Tensor) else Tensor(A_tilde)
    G = T.mean(A_tilde, axis=-1, keepdims=True)
    v = attentional_pool(F, G)
    v = T.reshape(v, v.shape[:-2] + (v.shape[-1],))
    v = T.dropout(v, keep_prob, rng, train)
    return T.fully_connected(v, params.weight, params.bias)
