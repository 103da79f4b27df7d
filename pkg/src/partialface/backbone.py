"""Truncated residual network producing feature maps F and attention maps A.

Layout (three spatial downsamplings, output side = input_size / 8)::

    stem   7x7 conv stride 2  ->  3x3 max pool stride 2
    stage1 bottleneck blocks                           (stride 1)
    stage2 bottleneck blocks, first block stride 2
    stage3 duplicated:  F branch -> F
                        A branch -> 1x1 conv (K) -> ReLU -> A

Normalization layers are replaced by a learnable per-channel scale and bias
(``affine``), since no batch statistics are used.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    stem_channels: int = 16
    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    K: int = 5
    pre_activation: bool = True
    bottleneck_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.input_size <= 0 or self.input_size % 8:
            raise ValueError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if len(self.blocks_per_stage) != 3 or len(self.stage_channels) != 3:
            raise ValueError("blocks_per_stage and stage_channels need exactly three entries")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("every stage needs at least one block")
        if any(c % self.bottleneck_ratio for c in self.stage_channels):
            raise ValueError("stage_channels must be divisible by bottleneck_ratio")

    @property
    def output_size(self) -> int:
        return self.input_size // 8

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)


FULL_BACKBONE = BackboneConfig(input_size=160, stem_channels=64, blocks_per_stage=(3, 4, 6),
                                stage_channels=(256, 512, 1024), K=12)
TOY_BACKBONE = BackboneConfig()


@dataclass
class BackboneOutput:
    F: Tensor
    A: Tensor


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class _Block:
    prefix: str
    cin: int
    mid: int
    cout: int
    stride: int

    @property
    def projects(self) -> bool:
        return self.stride != 1 or self.cin != self.cout


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self._blocks = _layout(self.config)

    # -- parameters -------------------------------------------------------
    @classmethod
    def build(cls, config: BackboneConfig, rng_seed: int = 0) -> "Backbone":
        rng = np.random.default_rng(rng_seed)
        net = cls(config)
        p: dict[str, np.ndarray] = {}
        c = config
        p["stem.conv.w"] = _he(rng, (7, 7, 3, c.stem_channels), 7 * 7 * 3)
        if not c.pre_activation:
            p["stem.norm.scale"] = np.ones(c.stem_channels)
            p["stem.norm.bias"] = np.zeros(c.stem_channels)
        for blocks in net._blocks.values():
            for b in blocks:
                _init_block(p, b, rng, c.pre_activation)
        cf = c.feature_channels
        for branch in ("f", "a"):
            if c.pre_activation:
                p[f"{branch}.post.scale"] = np.ones(cf)
                p[f"{branch}.post.bias"] = np.zeros(cf)
        p["att.conv.w"] = _he(rng, (1, 1, cf, c.K), cf)
        p["att.conv.b"] = np.zeros(c.K)
        net.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        return net

    # -- forward ----------------------------------------------------------
    def forward(self, images, train: bool = False) -> BackboneOutput:
        """Map ``N x S x S x 3`` (or a single ``S x S x 3``) normalized images to F and A."""
        return self._forward(images, calibrate=False)

    def calibrate(self, images) -> None:
        """Data-dependent init: set every affine layer to standardize its input on ``images``.

        Each scale and bias is chosen, in network order, so the layer's output
        has zero mean and unit variance per channel over the batch, which is
        what a batch normalization layer produces at initialization.
        """
        self._forward(images, calibrate=True)

    def _forward(self, images, calibrate: bool) -> BackboneOutput:
        x = images if isinstance(images, Tensor) else Tensor(images)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise T.ShapeError(f"backbone: expected images of shape (N, {s}, {s}, 3), got {x.shape}")
        p = _Calibrating(self.params) if calibrate else self.params
        pre = self.config.pre_activation

        x = T.conv2d(x, p["stem.conv.w"], stride=2, padding=3)
        if not pre:
            x = T.relu(_affine(x, p, "stem.norm"))
        x = T.maxpool2d(x, size=3, stride=2, padding=1)
        for b in self._blocks["s1"] + self._blocks["s2"]:
            x = _run_block(x, b, p, pre)

        outs = {}
        for branch in ("f", "a"):
            y = x
            for b in self._blocks[branch]:
                y = _run_block(y, b, p, pre)
            if pre:
                y = T.relu(_affine(y, p, f"{branch}.post"))
            outs[branch] = y
        F = outs["f"]
        A = T.relu(T.add(T.conv2d(outs["a"], p["att.conv.w"]), p["att.conv.b"]))
        if single:
            F = T.reshape(F, F.shape[1:])
            A = T.reshape(A, A.shape[1:])
        return BackboneOutput(F, A)


def build(config: BackboneConfig, rng_seed: int = 0) -> Backbone:
    return Backbone.build(config, rng_seed)


def _layout(c: BackboneConfig) -> dict[str, list[_Block]]:
    r = c.bottleneck_ratio
    layout: dict[str, list[_Block]] = {}
    cin = c.stem_channels
    stages = (("s1", 0, 1), ("s2", 1, 2))
    for name, i, stride in stages:
        blocks = []
        for j in range(c.blocks_per_stage[i]):
            cout = c.stage_channels[i]
            blocks.append(_Block(f"{name}.b{j}", cin, cout // r, cout, stride if j == 0 else 1))
            cin = cout
        layout[name] = blocks
    for branch in ("f", "a"):
        blocks, bin_ = [], cin
        for j in range(c.blocks_per_stage[2]):
            cout = c.stage_channels[2]
            blocks.append(_Block(f"{branch}.b{j}", bin_, cout // r, cout, 1))
            bin_ = cout
        layout[branch] = blocks
    return layout


def _init_block(p: dict, b: _Block, rng: np.random.Generator, pre: bool) -> None:
    # pre-activation: norm precedes each conv; post-activation: norm follows it
    for i, ch in enumerate((b.cin, b.mid, b.mid) if pre else (b.mid, b.mid, b.cout), start=1):
        p[f"{b.prefix}.n{i}.scale"] = np.ones(ch)
        p[f"{b.prefix}.n{i}.bias"] = np.zeros(ch)
    p[f"{b.prefix}.conv1.w"] = _he(rng, (1, 1, b.cin, b.mid), b.cin)
    p[f"{b.prefix}.conv2.w"] = _he(rng, (3, 3, b.mid, b.mid), 9 * b.mid)
    p[f"{b.prefix}.conv3.w"] = _he(rng, (1, 1, b.mid, b.cout), b.mid)
    if b.projects:
        p[f"{b.prefix}.proj.w"] = _he(rng, (1, 1, b.cin, b.cout), b.cin)


class _Calibrating(dict):
    """Parameter view whose affine layers standardize their input as they are read."""

    def standardize(self, x: Tensor, prefix: str) -> None:
        mean = x.data.mean(axis=(0, 1, 2))
        std = x.data.std(axis=(0, 1, 2))
        scale = 1.0 / np.where(std > 1e-8, std, 1.0)
        self[f"{prefix}.scale"].data[...] = scale
        self[f"{prefix}.bias"].data[...] = -mean * scale


def _affine(x: Tensor, p: dict, prefix: str) -> Tensor:
    if isinstance(p, _Calibrating):
        p.standardize(x, prefix)
    return T.add(T.mul(x, p[f"{prefix}.scale"]), p[f"{prefix}.bias"])


def _run_block(x: Tensor, b: _Block, p: dict, pre: bool) -> Tensor:
    n = b.prefix
    if pre:
        h = T.relu(_affine(x, p, f"{n}.n1"))
        shortcut = T.conv2d(h, p[f"{n}.proj.w"], stride=b.stride) if b.projects else x
        h = T.conv2d(h, p[f"{n}.conv1.w"])
        h = T.relu(_affine(h, p, f"{n}.n2"))
        h = T.conv2d(h, p[f"{n}.conv2.w"], stride=b.stride, padding=1)
        h = T.relu(_affine(h, p, f"{n}.n3"))
        h = T.conv2d(h, p[f"{n}.conv3.w"])
        return T.add(h, shortcut)
    shortcut = T.conv2d(x, p[f"{n}.proj.w"], stride=b.stride) if b.projects else x
    h = T.relu(_affine(T.conv2d(x, p[f"{n}.conv1.w"]), p, f"{n}.n1"))
    h = T.relu(_affine(T.conv2d(h, p[f"{n}.conv2.w"], stride=b.stride, padding=1), p, f"{n}.n2"))
    h = _affine(T.conv2d(h, p[f"{n}.conv3.w"]), p, f"{n}.n3")
    return T.relu(T.add(h, shortcut))
