"""Attention re-calibration and attentional pooling.

Shapes: ``A`` and ``F`` are ``[N x] h x w x K`` and ``[N x] h x w x C``; the
importance vector ``s`` is ``[N x] K``; descriptors ``v`` are ``[N x] K x C``.
"""

from __future__ import annotations

from enum import Enum

from . import tensor as T
from .tensor import Tensor


class RecalibMode(str, Enum):
    """Which (importance, per-pixel normalization) pair re-calibrates ``A``."""

    NONE = "none"
    SOFTMAX_SOFTMAX = "softmax_softmax"
    SOFTMAX_SIGMOID = "softmax_sigmoid"

    @classmethod
    def parse(cls, value: "str | RecalibMode") -> "RecalibMode":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown re-calibration mode {value!r} (choose from {choices})") from None


def _check_rank(x: Tensor, what: str) -> None:
    if x.ndim not in (3, 4):
        raise T.ShapeError(f"{what}: expected an [N x] h x w x K tensor, got shape {x.shape}")


def spatial_softmax(A: Tensor) -> Tensor:
    """Softmax over the pixels of each map independently."""
    _check_rank(A, "spatial_softmax")
    shape = A.shape
    flat = T.reshape(A, shape[:-3] + (shape[-3] * shape[-2], shape[-1]))
    return T.reshape(T.softmax(flat, axis=-2), shape)


def importance(A) -> Tensor:
    """Softmax over maps of each map's mean activation."""
    A = A if isinstance(A, Tensor) else Tensor(A)
    _check_rank(A, "importance")
    return T.softmax(T.global_average_pool(A), axis=-1)


def recalibrate(A, mode: "str | RecalibMode" = RecalibMode.SOFTMAX_SIGMOID) -> tuple[Tensor, Tensor]:
    """Return the re-calibrated stack and the importance vector used for it.

    ``none`` leaves ``A`` untouched but still returns ``s``, which the weighted
    losses need.
    """
    A = A if isinstance(A, Tensor) else Tensor(A)
    mode = RecalibMode.parse(mode)
    s = importance(A)
    if mode is RecalibMode.NONE:
        return A, s
    if mode is RecalibMode.SOFTMAX_SIGMOID:
        normed = T.sigmoid(A)
    else:
        normed = spatial_softmax(A)
    # s broadcasts over the two spatial axes
    scale = T.reshape(s, s.shape[:-1] + (1, 1, s.shape[-1]))
    return T.mul(normed, scale), s


def attentional_pool(F, A_tilde) -> Tensor:
    """``v[k, c] = sum_ij F[i, j, c] * A_tilde[i, j, k]`` (a plain sum, no mass normalization)."""
    F = F if isinstance(F, Tensor) else Tensor(F)
    A_tilde = A_tilde if isinstance(A_tilde, Tensor) else Tensor(A_tilde)
    if F.ndim != A_tilde.ndim or F.shape[:-1] != A_tilde.shape[:-1]:
        raise T.ShapeError(f"attentional_pool: spatial shapes differ, F {F.shape} vs attention {A_tilde.shape}")
    spec = "hwc,hwk->kc" if F.ndim == 3 else "nhwc,nhwk->nkc"
    return T.einsum(spec, F, A_tilde)
