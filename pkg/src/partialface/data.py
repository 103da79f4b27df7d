"""Procedural toy identities, image I/O and on-disk datasets.

Each identity is a fixed template (face ellipse, hair band, eyes, nose,
mouth and a skin texture whose frequency and orientation are identity
specific).  Images of an identity differ by a small translation, brightness
and contrast change and pixel noise.

On-disk layout written by :func:`write_dataset`::

    <root>/images/id007/0012.png
    <root>/labels.tsv       # path, label, split (train|test)
    <root>/landmarks.tsv    # landmark format of partialface.protocol
    <root>/pairs.tsv        # verification pairs drawn from the test split
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .protocol import LandmarkAnnotation, Pair, read_landmarks, write_landmarks, write_pairs

LABELS_HEADER = "# partialface-labels v1"


@dataclass(frozen=True)
class ToyDatasetConfig:
    num_identities: int = 20
    images_per_identity: int = 50
    image_size: int = 64
    seed: int = 0
    test_per_identity: int = 10
    max_shift: int = 3

    def __post_init__(self):
        if self.num_identities < 2 or self.images_per_identity < 1 or self.image_size < 16:
            raise ValueError(f"invalid toy dataset config {self}")
        if not 0 <= self.test_per_identity < self.images_per_identity:
            raise ValueError("test_per_identity must be smaller than images_per_identity")


@dataclass
class Dataset:
    images: np.ndarray                    # N x S x S x 3, uint8
    labels: np.ndarray                    # N, int
    paths: list[str]
    landmarks: list[LandmarkAnnotation]
    split: np.ndarray = field(default=None)  # N, "train" | "test"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, which: str) -> "Dataset":
        idx = np.flatnonzero(self.split == which)
        return Dataset(self.images[idx], self.labels[idx], [self.paths[i] for i in idx],
                       [self.landmarks[i] for i in idx], self.split[idx])

    def landmark_map(self) -> dict[str, LandmarkAnnotation]:
        return {lm.image_id: lm for lm in self.landmarks}


@dataclass(frozen=True)
class _Template:
    background: np.ndarray
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    face_rx: float
    face_ry: float
    hair_line: float
    eye_y: float
    eye_dx: float
    eye_r: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    mouth_h: float
    tex_freq: float
    tex_angle: float
    tex_amp: float


def _template(seed: int, identity: int, S: int) -> _Template:
    r = np.random.default_rng([seed, identity, 7])
    col = lambda lo, hi: r.uniform(lo, hi, size=3)  # noqa: E731
    return _Template(
        background=col(20, 90), skin=col(110, 230), hair=col(0, 120), iris=col(0, 255), lips=col(60, 240),
        face_rx=r.uniform(0.34, 0.44) * S, face_ry=r.uniform(0.42, 0.49) * S,
        hair_line=r.uniform(0.12, 0.26) * S,
        eye_y=r.uniform(0.34, 0.42) * S, eye_dx=r.uniform(0.13, 0.2) * S, eye_r=r.uniform(0.05, 0.085) * S,
        nose_len=r.uniform(0.1, 0.18) * S, nose_w=r.uniform(0.05, 0.1) * S,
        mouth_y=r.uniform(0.7, 0.78) * S, mouth_w=r.uniform(0.09, 0.18) * S, mouth_h=r.uniform(0.025, 0.06) * S,
        tex_freq=r.uniform(0.25, 0.9), tex_angle=r.uniform(0, np.pi), tex_amp=r.uniform(15, 35),
    )


def _render(t: _Template, S: int, rng: np.random.Generator, max_shift: int) -> tuple[np.ndarray, LandmarkAnnotation]:
    dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
    cx, cy = (S - 1) / 2 + dx, (S - 1) / 2 + dy
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    img = np.empty((S, S, 3))
    img[:] = t.background

    face = ((xx - cx) / t.face_rx) ** 2 + ((yy - cy) / t.face_ry) ** 2 <= 1.0
    u = (xx - cx) * np.cos(t.tex_angle) + (yy - cy) * np.sin(t.tex_angle)
    texture = t.tex_amp * np.sin(t.tex_freq * u)
    img[face] = t.skin + texture[face, None]
    hair = face & (yy < cy - t.face_ry + t.hair_line + (t.face_ry * 0.15))
    img[hair] = t.hair

    eye_y = t.eye_y + dy
    eyes = []
    for side in (-1, 1):
        ex = cx + side * t.eye_dx
        d2 = (xx - ex) ** 2 + (yy - eye_y) ** 2
        img[d2 <= t.eye_r ** 2] = (245, 245, 245)
        img[d2 <= (0.55 * t.eye_r) ** 2] = t.iris
        eyes.append((ex, eye_y))

    nose_top = eye_y + t.eye_r
    nose_tip = nose_top + t.nose_len
    frac = (yy - nose_top) / max(t.nose_len, 1e-9)
    nose = (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= t.nose_w * frac)
    img[nose] = t.skin * 0.6

    mouth_y = t.mouth_y + dy
    mouth = ((xx - cx) / t.mouth_w) ** 2 + ((yy - mouth_y) / t.mouth_h) ** 2 <= 1.0
    img[mouth] = t.lips

    contrast = rng.uniform(0.85, 1.15)
    brightness = rng.uniform(-15, 15)
    img = (img - 128.0) * contrast + 128.0 + brightness + rng.normal(0, 4, size=img.shape)
    lm = LandmarkAnnotation("", eyes[0], (cx, nose_tip), (cx, mouth_y))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), lm


def generate_toy_dataset(config: ToyDatasetConfig = ToyDatasetConfig()) -> Dataset:
    """Deterministic labelled toy faces; the last ``test_per_identity`` images of each identity form the test split."""
    S = config.image_size
    images, labels, paths, lms, split = [], [], [], [], []
    for ident in range(config.num_identities):
        t = _template(config.seed, ident, S)
        rng = np.random.default_rng([config.seed, ident, 11])
        for j in range(config.images_per_identity):
            img, lm = _render(t, S, rng, config.max_shift)
            path = f"images/id{ident:03d}/{j:04d}.png"
            images.append(img)
            labels.append(ident)
            paths.append(path)
            lms.append(LandmarkAnnotation(path, lm.left_eye, lm.nose, lm.mouth))
            split.append("test" if j >= config.images_per_identity - config.test_per_identity else "train")
    return Dataset(np.stack(images), np.array(labels), paths, lms, np.array(split))


def verification_pairs(dataset: Dataset, n_genuine: int, n_impostor: int, seed: int = 0) -> list[Pair]:
    """Balanced genuine / impostor pairs, deterministic for a seed, without repeats."""
    rng = np.random.default_rng([seed, 3])
    by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(dataset.labels):
        by_label.setdefault(int(lab), []).append(i)
    genuine: set[tuple[int, int]] = set()
    impostor: set[tuple[int, int]] = set()
    labs = sorted(by_label)
    out = []
    tries = 0
    while len(genuine) < n_genuine and tries < 100 * n_genuine:
        tries += 1
        members = by_label[labs[rng.integers(len(labs))]]
        if len(members) < 2:
            continue
        i, j = sorted(rng.choice(members, size=2, replace=False).tolist())
        if (i, j) not in genuine:
            genuine.add((i, j))
            out.append(Pair(dataset.paths[i], dataset.paths[j], True))
    tries = 0
    while len(impostor) < n_impostor and tries < 100 * n_impostor:
        tries += 1
        la, lb = rng.choice(labs, size=2, replace=False)
        i = int(rng.choice(by_label[int(la)]))
        j = int(rng.choice(by_label[int(lb)]))
        key = (min(i, j), max(i, j))
        if key not in impostor:
            impostor.add(key)
            out.append(Pair(dataset.paths[i], dataset.paths[j], False))
    return out


# -- image and dataset I/O ------------------------------------------------------

def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def save_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG", optimize=False)


def write_dataset(dataset: Dataset, root: str | Path, n_pairs: int = 300, pair_seed: int = 0) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for img, rel in zip(dataset.images, dataset.paths):
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        save_image(img, p)
    with open(root / "labels.tsv", "w", encoding="utf-8") as fh:
        fh.write(LABELS_HEADER + "\n")
        for rel, lab, sp in zip(dataset.paths, dataset.labels, dataset.split):
            fh.write(f"{rel}\t{int(lab)}\t{sp}\n")
    write_landmarks(dataset.landmarks, root / "landmarks.tsv")
    test = dataset.subset("test")
    if len(test) >= 2:
        write_pairs(verification_pairs(test, n_pairs // 2, n_pairs - n_pairs // 2, pair_seed), root / "pairs.tsv")


def read_dataset(root: str | Path, size: int | None = None) -> Dataset:
    root = Path(root)
    index = root / "labels.tsv"
    if not index.is_file():
        raise FileNotFoundError(f"dataset index not found: {index}")
    paths, labels, split = [], [], []
    with open(index, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            f = line.rstrip("\n").split("\t")
            if len(f) not in (2, 3):
                raise ValueError(f"{index}:{lineno}: expected 'path<TAB>label[<TAB>split]'")
            paths.append(f[0])
            labels.append(int(f[1]))
            split.append(f[2] if len(f) == 3 else "train")
    images = np.stack([load_image(root / p, size) for p in paths])
    lm_file = root / "landmarks.tsv"
    lm_map = read_landmarks(lm_file) if lm_file.is_file() else {}
    lms = [lm_map.get(p, LandmarkAnnotation(p, (0, 0), (0, 0), (0, 0))) for p in paths]
    return Dataset(images, np.array(labels), paths, lms, np.array(split))
