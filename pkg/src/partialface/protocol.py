"""Synthetic partial faces: training-time rectangular occlusion and the benchmark protocol.

A partial face keeps one axis-aligned rectangle of the source image and sets
every other pixel to exactly zero.  ``non_centered`` leaves the rectangle where
it was; ``centered`` moves it to the middle of the canvas.

File formats handled here (all tab-separated, ``#`` lines are comments):

* landmarks: ``image_path x_le y_le x_n y_n x_m y_m``
* pairs: LFW ``pairs.txt`` (``name i j`` / ``name1 i name2 j``) or ``pathA pathB label``
* manifest: header comment, column header, then
  ``pathA anchorA areaA placement pathB anchorB areaB label`` (areas in percent)
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Non-occluded areas in percent of the image.
PROTOCOL_AREAS = (9.0234375, 13.87109375, 19.44140625, 25.94921875, 33.39453125,
                  40.70963542, 48.27083333, 56.45703125, 65.63151042)

LANDMARKS = ("left_eye", "nose", "mouth")
ANCHORS = ("left_eye", "right_eye", "nose", "mouth")
HOLISTIC = "holistic"
PROTOCOLS = ("partial-holistic", "partial-same", "partial-cross")
PLACEMENTS = ("centered", "non_centered")

MANIFEST_VERSION = 1
MANIFEST_COLUMNS = ("pathA", "anchorA", "areaA", "placement", "pathB", "anchorB", "areaB", "label")


def protocol_areas() -> list[float]:
    return list(PROTOCOL_AREAS)


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkAnnotation:
    image_id: str
    left_eye: tuple[float, float]
    nose: tuple[float, float]
    mouth: tuple[float, float]

    def point(self, anchor: str, width: int) -> tuple[float, float]:
        """``(x, y)`` of an anchor; ``right_eye`` mirrors the left eye across the vertical midline."""
        if anchor == "right_eye":
            x, y = self.left_eye
            return (width - 1 - x, y)
        if anchor in LANDMARKS:
            return getattr(self, anchor)
        raise ProtocolError(f"unknown landmark {anchor!r}")

    def scaled(self, sx: float, sy: float) -> "LandmarkAnnotation":
        return LandmarkAnnotation(self.image_id, *((x * sx, y * sy) for x, y in
                                                   (self.left_eye, self.nose, self.mouth)))


@dataclass(frozen=True)
class CropSpec:
    anchor: str
    area_fraction: float
    placement: str = "non_centered"
    aspect: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.area_fraction <= 1.0:
            raise ProtocolError(f"area fraction must lie in (0, 1], got {self.area_fraction}")
        if self.placement not in PLACEMENTS:
            raise ProtocolError(f"unknown placement {self.placement!r}")
        if self.anchor not in ANCHORS + (HOLISTIC, "random"):
            raise ProtocolError(f"unknown anchor {self.anchor!r}")
        if self.aspect <= 0:
            raise ProtocolError("aspect must be positive")


@dataclass
class PartialFace:
    image: np.ndarray
    mask: np.ndarray
    spec: CropSpec | None = None

    @property
    def visible_fraction(self) -> float:
        return float(self.mask.mean())


def patch_size(area_fraction: float, height: int, width: int, aspect: float = 1.0) -> tuple[int, int]:
    """Rows and columns of a patch covering ``area_fraction`` of the image.

    The row count is rounded first and the column count absorbs the remaining
    rounding, so ``rows * cols`` is within ``rows / 2`` pixels of the target.
    """
    target = area_fraction * height * width
    rows = max(1, round(math.sqrt(target / aspect)))
    cols = max(1, round(target / rows))
    if rows > height or cols > width:
        raise ProtocolError(f"a {rows}x{cols} patch (area {area_fraction:.4f}, aspect {aspect}) "
                            f"does not fit a {height}x{width} image")
    return rows, cols


def place_rect(center: tuple[float, float], rows: int, cols: int, height: int, width: int) -> tuple[int, int]:
    """Top-left corner of a ``rows x cols`` rectangle centred on ``(x, y)``, shifted inside the image."""
    x, y = center
    top = math.floor(y - (rows - 1) / 2 + 0.5)
    left = math.floor(x - (cols - 1) / 2 + 0.5)
    top = min(max(top, 0), height - rows)
    left = min(max(left, 0), width - cols)
    return top, left


def make_partial(image: np.ndarray, landmark: LandmarkAnnotation | None, spec: CropSpec,
                 rng: np.random.Generator | None = None) -> PartialFace:
    image = np.asarray(image)
    H, W = image.shape[:2]
    if spec.anchor == HOLISTIC or spec.area_fraction == 1.0:
        return PartialFace(image.copy(), np.ones((H, W), dtype=bool), spec)
    rows, cols = patch_size(spec.area_fraction, H, W, spec.aspect)
    if spec.anchor == "random":
        if rng is None:
            raise ProtocolError("anchor 'random' needs an rng")
        top = int(rng.integers(0, H - rows + 1))
        left = int(rng.integers(0, W - cols + 1))
    else:
        if landmark is None:
            raise ProtocolError(f"anchor {spec.anchor!r} needs landmarks")
        if spec.anchor == "right_eye":
            # mirror the left-eye rectangle itself so rounding stays symmetric
            top, left = place_rect(landmark.left_eye, rows, cols, H, W)
            left = W - cols - left
        else:
            top, left = place_rect(landmark.point(spec.anchor, W), rows, cols, H, W)
    patch = image[top:top + rows, left:left + cols]
    if spec.placement == "centered":
        top, left = (H - rows) // 2, (W - cols) // 2
    out = np.zeros_like(image)
    mask = np.zeros((H, W), dtype=bool)
    out[top:top + rows, left:left + cols] = patch
    mask[top:top + rows, left:left + cols] = True
    return PartialFace(out, mask, spec)


def random_occlusion_augment(image: np.ndarray, rng: np.random.Generator, prob: float = 0.8,
                             a_min: float = 0.1, a_max: float = 1.0) -> PartialFace:
    """With probability ``prob`` keep a random rectangle of uniform random area in place."""
    image = np.asarray(image)
    if rng.random() >= prob:
        return PartialFace(image.copy(), np.ones(image.shape[:2], dtype=bool), None)
    a = float(rng.uniform(a_min, a_max))
    return make_partial(image, None, CropSpec("random", a, "non_centered"), rng)


# -- pair manifests ------------------------------------------------------------

@dataclass(frozen=True)
class Pair:
    path_a: str
    path_b: str
    same: bool


@dataclass(frozen=True)
class ManifestRow:
    path_a: str
    anchor_a: str
    area_a: float
    placement: str
    path_b: str
    anchor_b: str
    area_b: float
    label: int

    @property
    def combo(self) -> tuple[str, str]:
        return (self.anchor_a, self.anchor_b)


@dataclass
class PairManifest:
    protocol: str
    placement: str
    rows: list[ManifestRow]

    def __len__(self) -> int:
        return len(self.rows)


def anchor_combinations(protocol: str, anchors: Sequence[str]) -> list[tuple[str, str]]:
    """(anchorA, anchorB) pairs a protocol compares.

    ``partial-cross`` takes every unordered pair of distinct anchors and adds
    left eye vs. mirrored right eye when only the left eye is requested.
    """
    for a in anchors:
        if a not in ANCHORS:
            raise ProtocolError(f"unknown anchor {a!r} (choose from {', '.join(ANCHORS)})")
    ordered = [a for a in ANCHORS if a in set(anchors)]
    if protocol == "partial-holistic":
        return [(a, HOLISTIC) for a in ordered]
    if protocol == "partial-same":
        return [(a, a) for a in ordered]
    if protocol == "partial-cross":
        combos = [(b, a) for a, b in itertools.combinations(ordered, 2)]
        if "left_eye" in ordered and "right_eye" not in ordered:
            combos.insert(0, ("left_eye", "right_eye"))
        if not combos:
            raise ProtocolError("partial-cross needs at least two anchors (or the left eye)")
        return combos
    raise ProtocolError(f"unknown protocol {protocol!r} (choose from {', '.join(PROTOCOLS)})")


def build_manifest(pairs: Iterable[Pair], protocol: str, anchors: Sequence[str] = LANDMARKS,
                   areas: Sequence[float] | None = None, placement: str = "centered") -> PairManifest:
    """Expand base pairs into one row per (pair, area, anchor combination); areas in percent."""
    if placement not in PLACEMENTS:
        raise ProtocolError(f"unknown placement {placement!r}")
    areas = protocol_areas() if areas is None else [float(a) for a in areas]
    for a in areas:
        if not 0.0 < a <= 100.0:
            raise ProtocolError(f"area {a} outside (0, 100]")
    combos = anchor_combinations(protocol, anchors)
    rows = []
    for pair in pairs:
        for area in areas:
            for anchor_a, anchor_b in combos:
                area_b = 100.0 if anchor_b == HOLISTIC else area
                rows.append(ManifestRow(pair.path_a, anchor_a, area, placement,
                                        pair.path_b, anchor_b, area_b, int(pair.same)))
    return PairManifest(protocol, placement, rows)


def write_manifest(manifest: PairManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# partialface-manifest v{MANIFEST_VERSION} protocol={manifest.protocol} "
                 f"placement={manifest.placement}\n")
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in manifest.rows:
            fh.write(f"{r.path_a}\t{r.anchor_a}\t{float(r.area_a)!r}\t{r.placement}\t"
                     f"{r.path_b}\t{r.anchor_b}\t{float(r.area_b)!r}\t{r.label}\n")


def read_manifest(path: str | Path) -> PairManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    protocol, placement = "", ""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "protocol":
                        protocol = val
                    elif key == "placement":
                        placement = val
                continue
            if not line.strip() or line.split("\t")[0] == "pathA":
                continue
            f = line.split("\t")
            if len(f) != len(MANIFEST_COLUMNS):
                raise ProtocolError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(f)}")
            try:
                rows.append(ManifestRow(f[0], f[1], float(f[2]), f[3], f[4], f[5], float(f[6]), int(f[7])))
            except ValueError as e:
                raise ProtocolError(f"{path}:{lineno}: {e}") from None
    return PairManifest(protocol, placement, rows)


def read_landmarks(path: str | Path) -> dict[str, LandmarkAnnotation]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"landmark file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            f = line.rstrip("\n").split("\t")
            if len(f) != 7:
                raise ProtocolError(f"{path}:{lineno}: malformed landmark line (expected 7 tab-separated fields)")
            try:
                v = [float(x) for x in f[1:]]
            except ValueError:
                raise ProtocolError(f"{path}:{lineno}: malformed landmark coordinates") from None
            out[f[0]] = LandmarkAnnotation(f[0], (v[0], v[1]), (v[2], v[3]), (v[4], v[5]))
    return out


def write_landmarks(landmarks: Iterable[LandmarkAnnotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# partialface-landmarks v1\n")
        for lm in landmarks:
            vals = [*lm.left_eye, *lm.nose, *lm.mouth]
            fh.write(lm.image_id + "\t" + "\t".join(repr(float(v)) for v in vals) + "\n")


def _is_int(s: str) -> bool:
    return s.lstrip("-").isdigit()


def read_pairs(path: str | Path, fmt: str = "auto",
               lfw_template: str = "{name}/{name}_{index:04d}.jpg") -> list[Pair]:
    """Read an LFW-style ``pairs.txt`` or a ``pathA pathB label`` TSV.

    LFW entries are turned into relative paths with ``lfw_template``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pairs file not found: {path}")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        lines = [(i, ln.rstrip("\n")) for i, ln in enumerate(fh, 1)]
    for lineno, line in lines:
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t") if "\t" in line else line.split()
        kind = fmt
        if kind == "auto":
            if all(_is_int(x) for x in f):
                continue  # LFW header: folds / pairs per fold
            if len(f) == 3 and _is_int(f[1]) and _is_int(f[2]):
                kind = "lfw"
            elif len(f) == 4 and _is_int(f[1]) and _is_int(f[3]):
                kind = "lfw"
            else:
                kind = "tsv"
        if kind == "lfw":
            if all(_is_int(x) for x in f):
                continue
            if len(f) == 3:
                a = lfw_template.format(name=f[0], index=int(f[1]))
                b = lfw_template.format(name=f[0], index=int(f[2]))
                pairs.append(Pair(a, b, True))
            elif len(f) == 4:
                a = lfw_template.format(name=f[0], index=int(f[1]))
                b = lfw_template.format(name=f[2], index=int(f[3]))
                pairs.append(Pair(a, b, False))
            else:
                raise ProtocolError(f"{path}:{lineno}: malformed LFW pair line")
        elif kind == "tsv":
            if len(f) != 3 or f[2] not in ("0", "1"):
                raise ProtocolError(f"{path}:{lineno}: expected 'pathA<TAB>pathB<TAB>label' with label 0/1")
            pairs.append(Pair(f[0], f[1], f[2] == "1"))
        else:
            raise ValueError(f"unknown pairs format {fmt!r}")
    return pairs


def write_pairs(pairs: Iterable[Pair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# partialface-pairs v1\n")
        for p in pairs:
            fh.write(f"{p.path_a}\t{p.path_b}\t{int(p.same)}\n")
