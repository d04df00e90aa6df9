"""Samples, PNG planes, the dataset manifest and the synthetic shapes dataset.

Storage formats:
    image   8-bit RGB PNG, scaled to [0, 1]
    labels  8-bit grayscale PNG holding raw class indices (255 = ignore)
    depth   16-bit grayscale PNG scaled by 1/65535; the value 0 marks a
            pixel without depth

The synthetic generator stands in for translated comics: a "real" style and
a "comics" style rendered from the same layout, so both share labels and
depth exactly.
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE = 255
DOMAINS = ("real", "comics")
SPLITS = ("train", "val", "test")
CANVAS = 64
NUM_SHAPE_CLASSES = 4  # background, circle, rectangle, triangle
SHAPE_DEPTHS = (0.7, 0.5, 0.3)  # farthest first
HUE_SHIFT_DEG = 120.0
POSTER_LEVELS = 4


class IngestionError(ValueError):
    """A file in the dataset could not be decoded or is inconsistent."""


@dataclass
class Sample:
    image: np.ndarray    # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray   # (H, W) uint8
    depth: np.ndarray    # (H, W) float32 in [0, 1]
    valid: np.ndarray    # (H, W) bool, where depth is known
    domain: str = "real"
    name: str = ""

    def __post_init__(self):
        h, w = self.labels.shape
        if self.image.shape != (h, w, 3) or self.depth.shape != (h, w) or self.valid.shape != (h, w):
            raise IngestionError(
                f"{self.name or 'sample'}: planes disagree: image {self.image.shape}, "
                f"labels {self.labels.shape}, depth {self.depth.shape}")
        if self.domain not in DOMAINS:
            raise IngestionError(f"{self.name or 'sample'}: unknown domain {self.domain!r}")


def stack(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (images, labels, depth, valid)."""
    return (np.stack([s.image for s in samples]), np.stack([s.labels for s in samples]),
            np.stack([s.depth for s in samples]), np.stack([s.valid for s in samples]))


# -- PNG planes ----------------------------------------------------------------

def quantize_image(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_depth(depth: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    q = np.round(np.clip(depth, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if valid is not None:
        q = np.where(valid, np.maximum(q, 1), 0).astype(np.uint16)
    return q


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(quantize_image(img), "RGB").save(path)


def write_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), "L").save(path)


def write_depth(path, depth: np.ndarray, valid: np.ndarray | None = None) -> None:
    q = quantize_depth(depth, valid)
    Image.fromarray(q).save(path)  # uint16 gives mode I;16


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot decode ({exc})") from exc
    return img


def read_image(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("RGB", "RGBA", "L", "P"):
        raise IngestionError(f"{path}: expected an 8-bit image, got mode {img.mode}")
    return np.asarray(img.convert("RGB"), dtype=np.float32) / np.float32(255.0)


def read_labels(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("L", "P"):
        raise IngestionError(f"{path}: labels must be 8-bit grayscale, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8)


def read_depth(path) -> tuple[np.ndarray, np.ndarray]:
    """(depth in [0, 1], valid mask)."""
    img = _open(path)
    if img.mode not in ("I;16", "I;16L", "I"):
        raise IngestionError(f"{path}: depth must be 16-bit grayscale, got mode {img.mode}")
    raw = np.asarray(img).astype(np.int64)
    if raw.min() < 0 or raw.max() > 65535:
        raise IngestionError(f"{path}: depth values outside 16-bit range")
    return (raw / 65535.0).astype(np.float32), raw > 0


# -- manifest --------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image: str
    labels: str
    depth: str
    domain: str
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str, domain: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if e.split == name and (domain is None or e.domain == domain)]

    def validate(self) -> None:
        seen = {}
        for e in self.entries:
            if e.domain not in DOMAINS:
                raise IngestionError(f"manifest: unknown domain {e.domain!r} for {e.image}")
            if e.split not in SPLITS:
                raise IngestionError(f"manifest: unknown split {e.split!r} for {e.image}")
            prev = seen.setdefault(e.image, e.split)
            if prev != e.split:
                raise IngestionError(f"manifest: {e.image} appears in splits {prev} and {e.split}")

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write("# image\tlabels\tdepth\tdomain\tsplit\n")
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for e in self.entries:
                w.writerow([e.image, e.labels, e.depth, e.domain, e.split])

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise IngestionError(f"{path}: {exc}") from exc
        entries = []
        for no, line in enumerate(lines, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise IngestionError(f"{path}:{no}: expected 5 tab-separated fields, got {len(parts)}")
            entries.append(ManifestEntry(*parts))
        m = cls(entries, path.parent)
        m.validate()
        return m

    def load(self, entry: ManifestEntry) -> Sample:
        return load_sample(entry, self.root)

    def load_split(self, name: str, domain: str | None = None) -> list[Sample]:
        return [self.load(e) for e in self.split(name, domain)]


def load_sample(entry: ManifestEntry, root=".") -> Sample:
    root = Path(root)
    paths = [root / p for p in (entry.image, entry.labels, entry.depth)]
    for p in paths:
        if not p.is_file():
            raise IngestionError(f"{p}: no such file")
    image = read_image(paths[0])
    labels = read_labels(paths[1])
    depth, valid = read_depth(paths[2])
    for p, shape in zip(paths, (image.shape[:2], labels.shape, depth.shape)):
        if shape != labels.shape:
            raise IngestionError(f"{p}: extent {shape} does not match labels {labels.shape}")
    return Sample(image, labels, depth, valid, entry.domain, entry.image)


def write_dataset(out_dir, splits: dict[str, list[Sample]]) -> DatasetManifest:
    """Write every sample's planes under ``out_dir`` and the manifest next to them."""
    out = Path(out_dir)
    entries = []
    for split, samples in splits.items():
        for i, s in enumerate(samples):
            d = out / split / s.domain
            d.mkdir(parents=True, exist_ok=True)
            stem = f"{i:05d}"
            files = [d / f"{stem}_{kind}.png" for kind in ("image", "labels", "depth")]
            write_image(files[0], s.image)
            write_labels(files[1], s.labels)
            write_depth(files[2], s.depth, s.valid)
            rel = [os.path.relpath(f, out) for f in files]
            entries.append(ManifestEntry(*rel, s.domain, split))
    m = DatasetManifest(entries, out)
    m.validate()
    m.write(out / "manifest.tsv")
    return m


# -- synthetic shapes ------------------------------------------------------------

def _shape_mask(kind: int, cy: float, cx: float, size: float, n: int = CANVAS) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    if kind == 1:  # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if kind == 2:  # axis-aligned rectangle, aspect fixed by size
        return (np.abs(yy - cy) <= 0.7 * size) & (np.abs(xx - cx) <= size)
    # upward isosceles triangle inscribed in a 2size square
    top, bottom = cy - size, cy + size
    half = (yy - top) / (2 * size) * size
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def _layout(rng: np.random.Generator, n: int = CANVAS):
    """1-3 non-overlapping shapes as (class, mask), largest first."""
    want = int(rng.integers(1, 4))
    shapes, used = [], np.zeros((n, n), bool)
    for _ in range(200):
        if len(shapes) == want:
            break
        kind = int(rng.integers(1, 4))
        size = float(rng.uniform(6.0, 13.0))
        cy, cx = rng.uniform(size + 1, n - size - 1, size=2)
        m = _shape_mask(kind, cy, cx, size, n)
        grown = m | np.roll(m, 1, 0) | np.roll(m, -1, 0) | np.roll(m, 1, 1) | np.roll(m, -1, 1)
        if m.sum() < 20 or (grown & used).any():
            continue
        shapes.append((kind, m))
        used |= grown
    shapes.sort(key=lambda s: -int(s[1].sum()))
    return shapes


def _render_real(rng: np.random.Generator, shapes, n: int = CANVAS) -> np.ndarray:
    """Flat near-gray background, saturated flat shapes, mild sensor noise.

    The gray level avoids the posterisation thresholds (1/6, 1/2, 5/6) so the
    comics style maps the background to one flat level instead of bands.
    """
    gray = rng.uniform(0.25, 0.4) if rng.random() < 0.5 else rng.uniform(0.6, 0.75)
    img = gray + rng.uniform(-0.03, 0.03, 3) + np.zeros((n, n, 3))
    for _, m in shapes:
        hue, sat, val = rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)
        img[m] = colorsys.hsv_to_rgb(hue, sat, val)
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Linear RGB hue rotation about the gray axis (luma preserving)."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    # rotation in the YIQ chroma plane
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return np.linalg.inv(to_yiq) @ rot @ to_yiq


def comics_style(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Hue rotation, posterisation and black outlines on each shape's border pixels."""
    img = np.clip(image @ hue_rotation_matrix(HUE_SHIFT_DEG).T, 0.0, 1.0)
    img = np.round(img * (POSTER_LEVELS - 1)) / (POSTER_LEVELS - 1)
    edge = np.zeros(labels.shape, bool)
    edge[:-1] |= labels[:-1] != labels[1:]
    edge[1:] |= labels[1:] != labels[:-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    img[edge & (labels > 0)] = 0.0  # ink lies on the object; labels are unchanged
    return img


def synth_sample(seed: int, index: int, style: str = "real") -> Sample:
    rng = np.random.default_rng([seed, index])
    shapes = _layout(rng)
    labels = np.zeros((CANVAS, CANVAS), np.uint8)
    depth = np.ones((CANVAS, CANVAS))
    for order, (kind, m) in enumerate(shapes):
        labels[m] = kind
        depth[m] = SHAPE_DEPTHS[order]
    image = _render_real(rng, shapes)
    if style == "comics":
        image = comics_style(image, labels)
    elif style != "real":
        raise ValueError(f"unknown style {style!r}")
    # store what the PNG planes hold so disk and memory agree exactly
    image = quantize_image(image).astype(np.float32) / np.float32(255.0)
    depth = (quantize_depth(depth) / 65535.0).astype(np.float32)
    return Sample(image, labels, depth, np.ones(labels.shape, bool), style,
                  f"synth-{seed}-{index}-{style}")


def synth_dataset(seed: int, count: int, style: str = "real") -> list[Sample]:
    """``count`` samples; the same seed gives the same layouts in either style."""
    if style not in DOMAINS:
        raise ValueError(f"style must be one of {DOMAINS}, got {style!r}")
    return [synth_sample(seed, i, style) for i in range(count)]


@dataclass
class ToySplits:
    train_real: list
    train_comics: list   # unlabelled use only: feeds the DTA stream
    val_comics: list


def toy_splits(seed: int = 0, n_train: int = 400, n_val: int = 100,
               n_train_comics: int | None = None) -> ToySplits:
    """Real training data, unpaired comics training images, comics validation."""
    nc = n_train if n_train_comics is None else n_train_comics
    return ToySplits(synth_dataset(seed, n_train, "real"),
                     synth_dataset(seed + 1, nc, "comics"),
                     synth_dataset(seed + 2, n_val, "comics"))
