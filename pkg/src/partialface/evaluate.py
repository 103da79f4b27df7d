"""Embedding extraction and pair verification by cosine distance.

Report CSV (version 1)::

    # partialface-report v1 threshold=<policy>
    protocol,anchorA,anchorB,area,accuracy
    partial-cross,nose,left_eye,9.0234375,0.83
    ...
    partial-cross,nose,left_eye,mean,0.91      # per anchor pair, over areas
    partial-cross,*,*,mean,0.90                # summary: mean of per-area accuracies

Plot data (one row per area, one column per anchor pair, as in an
accuracy-vs-area figure)::

    # partialface-plotdata v1 protocol=partial-cross
    area,nose - left_eye,mouth - nose,...
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import load_image
from .model import PartialFaceModel, to_input
from .protocol import (ANCHORS, CropSpec, HOLISTIC, LandmarkAnnotation, ManifestRow, PairManifest,
                       ProtocolError, make_partial)

REPORT_HEADER = "# partialface-report v1"
PLOT_HEADER = "# partialface-plotdata v1"
REPORT_COLUMNS = ("protocol", "anchorA", "anchorB", "area", "accuracy")


def cosine_distance(f1, f2) -> float | np.ndarray:
    """``1 - cos(f1, f2)``; works row-wise on ``N x D`` arrays."""
    f1, f2 = np.asarray(f1, dtype=np.float64), np.asarray(f2, dtype=np.float64)
    n1 = np.linalg.norm(f1, axis=-1)
    n2 = np.linalg.norm(f2, axis=-1)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ValueError("cosine_distance: zero vector")
    d = 1.0 - np.sum(f1 * f2, axis=-1) / (n1 * n2)
    d = np.clip(d, 0.0, 2.0)
    return float(d) if d.ndim == 0 else d


def embed(model: PartialFaceModel, images, batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings of uint8 images (``S x S x 3`` or ``N x S x S x 3``) or a PartialFace."""
    if hasattr(images, "mask"):
        images = images.image
    images = np.asarray(images)
    if images.ndim == 3:
        return embed(model, images[None], batch_size)[0]
    out = [model.embed(to_input(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.embedding_dim))


# -- threshold policies ----------------------------------------------------------

def _accuracy(dist: np.ndarray, labels: np.ndarray, thr: float) -> float:
    return float(np.mean((dist < thr) == (labels == 1)))


def best_threshold(dist: np.ndarray, labels: np.ndarray) -> float:
    """Threshold maximizing accuracy; candidates are midpoints between sorted distances."""
    d = np.unique(dist)
    cands = np.concatenate(([d[0] - 1e-6], (d[:-1] + d[1:]) / 2, [d[-1] + 1e-6]))
    accs = np.array([_accuracy(dist, labels, t) for t in cands])
    return float(cands[int(np.argmax(accs))])


def cross_validated_accuracy(dist: np.ndarray, labels: np.ndarray, folds: int = 10) -> tuple[float, float]:
    """Pooled held-out accuracy with the threshold picked on the other folds.

    Rows are assumed to be in canonical order; fold ``i`` takes every
    ``folds``-th row.  Returns ``(accuracy, mean threshold)``.
    """
    n = len(dist)
    if n == 0:
        raise ValueError("no pairs to evaluate")
    folds = min(folds, n)
    if folds < 2:
        t = best_threshold(dist, labels)
        return _accuracy(dist, labels, t), t
    fold_of = np.arange(n) % folds
    correct, thresholds = 0, []
    for k in range(folds):
        test = fold_of == k
        t = best_threshold(dist[~test], labels[~test])
        thresholds.append(t)
        correct += int(np.sum((dist[test] < t) == (labels[test] == 1)))
    return correct / n, float(np.mean(thresholds))


def parse_threshold(policy: str | float) -> float | None:
    """``auto`` -> None (cross-validation), anything else -> fixed threshold."""
    if isinstance(policy, (int, float)):
        return float(policy)
    if policy == "auto":
        return None
    try:
        return float(policy)
    except ValueError:
        raise ValueError(f"threshold must be 'auto' or a number, got {policy!r}") from None


# -- report --------------------------------------------------------------------

@dataclass
class Cell:
    protocol: str
    anchor_a: str
    anchor_b: str
    area: float
    accuracy: float
    threshold: float
    n_pairs: int


@dataclass
class VerificationReport:
    cells: list[Cell]
    threshold_policy: str
    distances: dict = field(default_factory=dict, repr=False)

    def protocols(self) -> list[str]:
        return sorted({c.protocol for c in self.cells})

    def areas(self, protocol: str) -> list[float]:
        return sorted({c.area for c in self.cells if c.protocol == protocol})

    def combos(self, protocol: str) -> list[tuple[str, str]]:
        seen: dict[tuple[str, str], None] = {}
        for c in self.cells:
            if c.protocol == protocol:
                seen.setdefault((c.anchor_a, c.anchor_b), None)
        return list(seen)

    def per_area(self, protocol: str) -> dict[float, float]:
        """Accuracy per area, averaged over anchor pairs."""
        acc: dict[float, list[float]] = defaultdict(list)
        for c in self.cells:
            if c.protocol == protocol:
                acc[c.area].append(c.accuracy)
        return {a: float(np.mean(v)) for a, v in sorted(acc.items())}

    def combo_mean(self, protocol: str, combo: tuple[str, str]) -> float:
        return float(np.mean([c.accuracy for c in self.cells
                              if c.protocol == protocol and (c.anchor_a, c.anchor_b) == combo]))

    def mean_accuracy(self, protocol: str | None = None) -> float:
        """Arithmetic mean of the per-area accuracies."""
        protocol = protocol or self.protocols()[0]
        return float(np.mean(list(self.per_area(protocol).values())))

    def threshold(self, protocol: str | None = None) -> float:
        protocol = protocol or self.protocols()[0]
        return float(np.mean([c.threshold for c in self.cells if c.protocol == protocol]))

    # -- serialization --------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"{REPORT_HEADER} threshold={self.threshold_policy}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for p in self.protocols():
            for c in self.cells:
                if c.protocol == p:
                    w.writerow([p, c.anchor_a, c.anchor_b, repr(float(c.area)), repr(float(c.accuracy))])
            for combo in self.combos(p):
                w.writerow([p, combo[0], combo[1], "mean", repr(float(self.combo_mean(p, combo)))])
            w.writerow([p, "*", "*", "mean", repr(float(self.mean_accuracy(p)))])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def to_plot_data(self, protocol: str | None = None) -> str:
        protocol = protocol or self.protocols()[0]
        combos = self.combos(protocol)
        lookup = {(c.anchor_a, c.anchor_b, c.area): c.accuracy for c in self.cells if c.protocol == protocol}
        buf = io.StringIO()
        buf.write(f"{PLOT_HEADER} protocol={protocol}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["area"] + [f"{a} - {b}" for a, b in combos])
        for area in self.areas(protocol):
            w.writerow([repr(float(area))] + [repr(float(lookup[(a, b, area)])) if (a, b, area) in lookup else ""
                                       for a, b in combos])
        return buf.getvalue()

    def write_plot_data(self, path: str | Path, protocol: str | None = None) -> None:
        Path(path).write_text(self.to_plot_data(protocol), encoding="utf-8")


def read_report_csv(text: str) -> tuple[list[Cell], dict[tuple[str, str, str], float]]:
    """Parse report CSV text into per-area cells and the ``mean`` rows keyed by (protocol, A, B)."""
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    cells, means = [], {}
    for r in csv.DictReader(rows):
        if r["area"] == "mean":
            means[(r["protocol"], r["anchorA"], r["anchorB"])] = float(r["accuracy"])
        else:
            cells.append(Cell(r["protocol"], r["anchorA"], r["anchorB"], float(r["area"]),
                              float(r["accuracy"]), math.nan, 0))
    return cells, means


def read_plot_data(text: str) -> tuple[str, list[Cell]]:
    lines = text.splitlines()
    protocol = ""
    for tok in lines[0].lstrip("#").split():
        if tok.startswith("protocol="):
            protocol = tok.split("=", 1)[1]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    reader = csv.reader(body)
    header = next(reader)
    combos = [tuple(h.split(" - ")) for h in header[1:]]
    cells = []
    for row in reader:
        area = float(row[0])
        for (a, b), v in zip(combos, row[1:]):
            if v != "":
                cells.append(Cell(protocol, a, b, area, float(v), math.nan, 0))
    return protocol, cells


# -- evaluation ------------------------------------------------------------------

def _crop_key(path: str, anchor: str, area: float, placement: str) -> tuple:
    if anchor == HOLISTIC or area >= 100.0:
        return (path, HOLISTIC, 100.0, "non_centered")
    return (path, anchor, area, placement)


def evaluate(model: PartialFaceModel, manifest: PairManifest,
             image_loader: Callable[[str], np.ndarray],
             landmarks: Mapping[str, LandmarkAnnotation] | None = None,
             threshold: str | float = "auto", folds: int = 10,
             batch_size: int = 64) -> VerificationReport:
    """Verify every manifest row and report accuracy per (anchor pair, area).

    ``image_loader(path)`` returns a uint8 ``H x W x 3`` image.  A pair is
    called genuine when its cosine distance is below the threshold.  With
    ``threshold="auto"`` each cell uses 10-fold cross-validated thresholds
    over its rows in canonical order, so results do not depend on row order.
    """
    fixed = parse_threshold(threshold)
    rows = sorted(manifest.rows, key=lambda r: (r.path_a, r.anchor_a, r.area_a, r.path_b,
                                                r.anchor_b, r.area_b, r.placement, r.label))
    if not rows:
        raise ValueError("evaluate: empty manifest")

    images: dict[str, np.ndarray] = {}
    missing = []
    for p in sorted({r.path_a for r in rows} | {r.path_b for r in rows}):
        try:
            images[p] = image_loader(p)
        except FileNotFoundError:
            missing.append(p)
    if missing:
        raise FileNotFoundError("missing images: " + ", ".join(missing[:20])
                                + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))

    keys: dict[tuple, int] = {}
    for r in rows:
        for k in (_crop_key(r.path_a, r.anchor_a, r.area_a, r.placement),
                  _crop_key(r.path_b, r.anchor_b, r.area_b, r.placement)):
            keys.setdefault(k, len(keys))

    size = model.config.backbone.input_size
    crops = np.empty((len(keys), size, size, 3), dtype=np.uint8)
    for (path, anchor, area, placement), i in keys.items():
        img = images[path]
        lm = None
        if anchor != HOLISTIC:
            if landmarks is None or path not in landmarks:
                raise ProtocolError(f"no landmarks for {path}")
            lm = landmarks[path]
        face = make_partial(img, lm, CropSpec(anchor, area / 100.0, placement)).image
        if face.shape[:2] != (size, size):
            from PIL import Image
            face = np.asarray(Image.fromarray(face).resize((size, size), Image.BILINEAR))
        crops[i] = face
    emb = embed(model, crops, batch_size)

    groups: dict[tuple, list[ManifestRow]] = defaultdict(list)
    for r in rows:
        groups[(r.anchor_a, r.anchor_b, r.area_a)].append(r)

    cells, dists = [], {}
    for (a, b, area), grp in groups.items():
        ia = [keys[_crop_key(r.path_a, r.anchor_a, r.area_a, r.placement)] for r in grp]
        ib = [keys[_crop_key(r.path_b, r.anchor_b, r.area_b, r.placement)] for r in grp]
        d = np.atleast_1d(cosine_distance(emb[ia], emb[ib]))
        lab = np.array([r.label for r in grp])
        if fixed is None:
            acc, thr = cross_validated_accuracy(d, lab, folds)
        else:
            acc, thr = _accuracy(d, lab, fixed), fixed
        cells.append(Cell(manifest.protocol, a, b, area, acc, thr, len(grp)))
        dists[(a, b, area)] = (d, lab)
    rank = {a: i for i, a in enumerate(ANCHORS + (HOLISTIC,))}
    cells.sort(key=lambda c: (rank.get(c.anchor_a, 99), rank.get(c.anchor_b, 99), c.anchor_a, c.anchor_b, c.area))
    return VerificationReport(cells, str(threshold), dists)


def directory_loader(root: str | Path) -> Callable[[str], np.ndarray]:
    root = Path(root)

    def load(path: str) -> np.ndarray:
        p = Path(path)
        return load_image(p if p.is_absolute() else root / p)

    return load
