"""Full model: backbone -> re-calibration -> pooling -> aggregation, plus checkpoints.

Checkpoint format (``.npz``, version 1): one array per parameter under its
dotted name (``s1.b0.conv1.w``, ``agg.w``, ``head.b`` ...) and a ``__meta__``
entry holding a JSON document::

    {"format": "partialface-checkpoint", "version": 1,
     "config": {...ModelConfig...}, "step": <int>}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregate import AggregateParams, BottleneckParams, aggregate, global_pool_baseline
from .attend import RecalibMode, attentional_pool, recalibrate
from .backbone import Backbone, BackboneConfig
from .losses import ClassifierHead
from .tensor import Tensor

CHECKPOINT_FORMAT = "partialface-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    recalib: str = RecalibMode.SOFTMAX_SIGMOID.value
    aggregate: bool = True
    weighted_ce: bool = True
    embedding_dim: int = 32
    num_classes: int = 20
    keep_prob: float = 0.8
    l2_include_biases: bool = False

    def __post_init__(self):
        object.__setattr__(self, "recalib", RecalibMode.parse(self.recalib).value)
        if self.embedding_dim < 1 or self.num_classes < 2:
            raise ValueError("embedding_dim must be >= 1 and num_classes >= 2")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")

    @property
    def K(self) -> int:
        return self.backbone.K

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


FULL_MODEL = ModelConfig(backbone=BackboneConfig(input_size=160, stem_channels=64,
                                                  blocks_per_stage=(3, 4, 6),
                                                  stage_channels=(256, 512, 1024), K=12),
                          embedding_dim=256, num_classes=8631)


@dataclass
class ModelOutput:
    F: Tensor
    A: Tensor
    A_tilde: Tensor
    s: Tensor
    f_k: Tensor | None
    f: Tensor


class PartialFaceModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.backbone = Backbone(config.backbone, {k: v for k, v in params.items()
                                                   if not k.startswith(("agg.", "bneck.", "head."))})
        if config.aggregate:
            self.agg = AggregateParams(params["agg.w"], params["agg.b"])
        else:
            self.bneck = BottleneckParams(params["bneck.w"], params["bneck.b"])
        self.head = ClassifierHead(params["head.w"], params["head.b"])
        self.step = 0

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "PartialFaceModel":
        bb = Backbone.build(config.backbone, seed)
        rng = np.random.default_rng([seed, 1])
        params = dict(bb.params)
        C, D = config.backbone.feature_channels, config.embedding_dim
        # descriptors sum over all h*w pixels, so the bottleneck's effective fan-in is C*h*w
        fan_in = C * config.backbone.output_size ** 2
        if config.aggregate:
            agg = AggregateParams.init(config.K, C, D, rng, fan_in)
            params["agg.w"], params["agg.b"] = agg.weight, agg.bias
        else:
            bn = BottleneckParams.init(C, D, rng, fan_in)
            params["bneck.w"], params["bneck.b"] = bn.weight, bn.bias
        head = ClassifierHead.init(D, config.num_classes, rng)
        params["head.w"], params["head.b"] = head.weight, head.bias
        return cls(config, params)

    def calibrate(self, images) -> None:
        """Data-dependent init of the backbone's affine layers (see :meth:`Backbone.calibrate`)."""
        self.backbone.calibrate(images)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, images, train: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        out = self.backbone.forward(images, train=train)
        A_tilde, s = recalibrate(out.A, self.config.recalib)
        kp = self.config.keep_prob
        if train and kp < 1.0 and rng is None:
            raise ValueError("forward: train mode with dropout needs an rng")
        if self.config.aggregate:
            v = attentional_pool(out.F, A_tilde)
            f_k, f = aggregate(v, self.agg, kp, rng, train)
        else:
            f_k, f = None, global_pool_baseline(out.F, A_tilde, self.bneck, kp, rng, train)
        return ModelOutput(out.F, out.A, A_tilde, s, f_k, f)

    def embed(self, images) -> np.ndarray:
        """Final features ``f`` in eval mode, ``N x D`` (or ``D`` for one image)."""
        return self.forward(images, train=False).f.data

    # -- checkpoints --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": self.config.to_dict(), "step": int(self.step)}
        arrays = {k: v.data for k, v in self.params.items()}
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "PartialFaceModel":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            if "__meta__" not in z:
                raise ValueError(f"{path}: not a partialface checkpoint (missing __meta__)")
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r} "
                                 f"v{meta.get('version')}")
            config = ModelConfig.from_dict(meta["config"])
            ref = cls.build(config, 0)
            params = {}
            for name, p in ref.params.items():
                if name not in z:
                    raise ValueError(f"{path}: missing parameter {name}")
                arr = np.array(z[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, expected {p.shape}")
                params[name] = Tensor(arr, requires_grad=True, name=name)
        model = cls(config, params)
        model.step = int(meta.get("step", 0))
        return model

    def with_config(self, **changes) -> "PartialFaceModel":
        """Copy with a changed config that keeps the parameter layout (e.g. ``weighted_ce``)."""
        config = replace(self.config, **changes)
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        model = PartialFaceModel(config, params)
        model.step = self.step
        return model


def generic_point(model: PartialFaceModel, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move a freshly built model off its degenerate start, in place, for gradient checks.

    The zero classifier head blocks every gradient below it, and zero biases
    leave dead pixels exactly on a ReLU kink where no derivative exists.
    The head is redrawn and every scale and bias gets a small random offset.
    """
    for name, p in model.params.items():
        if name.startswith("head."):
            p.data[...] = rng.normal(0.0, scale, size=p.shape)
        elif name.endswith((".scale", ".bias", ".b")):
            p.data += rng.normal(0.0, scale, size=p.shape)


def to_input(images_uint8: np.ndarray) -> np.ndarray:
    """8-bit pixels to the network's [-1, 1] range."""
    return np.asarray(images_uint8, dtype=np.float64) / 127.5 - 1.0
