"""Slice/label corpora on disk and the two-modality brain phantom.

Images and labels are stored one array per ``.npy`` file (images float32,
labels uint8).  A manifest is a JSON document::

    {"split": "train", "resolution": 64,
     "entries": [{"image_path": ..., "label_path": ..., "subject_id": ..., "modality_id": 0}, ...]}

Relative paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

PHANTOM_CLASSES = ["background", "csf", "gm", "wm"]
# Per-class base intensities (background, CSF, GM, WM) before bias and noise.
# The second modality reverses the order with uneven spacing.
PHANTOM_CONTRAST = (
    np.array([0.05, 0.35, 0.60, 0.90]),
    np.array([0.95, 0.80, 0.45, 0.15]),
)
PHANTOM_NOISE = 0.02


class LoadError(FileNotFoundError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class ImageSlice:
    pixels: np.ndarray
    subject_id: str
    modality_id: int
    slice_index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValidationError(f"image slice must be 2D, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < -1.0 or self.pixels.max() > 1.0):
            raise ValidationError("image intensities must lie in [-1, 1]")
        if self.modality_id < 0 or self.slice_index < 0:
            raise ValidationError("modality_id and slice_index must be nonnegative")


@dataclass
class LabelMap:
    classes: np.ndarray
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.classes = np.asarray(self.classes)
        if self.classes.ndim != 2:
            raise ValidationError(f"label map must be 2D, got shape {self.classes.shape}")
        if self.num_classes < 2:
            raise ValidationError("a label map needs at least two classes")
        if self.classes.size and (self.classes.min() < 0 or self.classes.max() >= self.num_classes):
            raise ValidationError(f"label entries must lie in [0, {self.num_classes})")
        if not self.class_names:
            self.class_names = [f"class{i}" for i in range(self.num_classes)]


@dataclass
class ManifestEntry:
    image_path: str
    label_path: str | None
    subject_id: str
    modality_id: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    resolution: int = 64
    root: Path | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValidationError(f"split must be 'train' or 'test', got {self.split!r}")
        self.entries = [e if isinstance(e, ManifestEntry) else ManifestEntry(**e) for e in self.entries]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def to_json(self) -> str:
        data = {"entries": [asdict(e) for e in self.entries], "split": self.split, "resolution": self.resolution}
        return json.dumps(data, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise LoadError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        unknown = set(data) - {"entries", "split", "resolution"}
        if unknown:
            raise ValidationError(f"unknown manifest fields: {sorted(unknown)}")
        return cls(entries=data["entries"], split=data["split"], resolution=int(data["resolution"]),
                   root=path.parent)


def check_disjoint(*manifests: DatasetManifest) -> None:
    """Every subject may appear in one split only."""
    owner: dict[str, str] = {}
    for man in manifests:
        for e in man.entries:
            if owner.setdefault(e.subject_id, man.split) != man.split:
                raise ValidationError(f"subject {e.subject_id!r} appears in more than one split")


def _read_array(path: Path) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"file not found: {path}")
    try:
        arr = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if arr.ndim != 2:
        raise ValidationError(f"{path}: expected a 2D array, got shape {arr.shape}")
    return arr


def rescale_minmax(img: np.ndarray) -> np.ndarray:
    """Map the slice's min/max to -1/+1.  Already-normalised slices pass through unchanged."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if lo == -1.0 and hi == 1.0:
        return img.astype(np.float32)
    if hi == lo:
        return np.zeros_like(img, dtype=np.float32)
    return ((img - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32)


def resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    if img.shape == (h, w):
        return img
    zoom = (h / img.shape[0], w / img.shape[1])
    return ndimage.zoom(img.astype(np.float64), zoom, order=1, grid_mode=True, mode="nearest")


def downsample_labels(labels, target_h: int, target_w: int):
    """Nearest-neighbour resampling of a class map (sampling at pixel centres).

    Accepts a :class:`LabelMap` or a plain 2D array and returns the same kind.
    """
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target dimensions must be positive")
    grid = labels.classes if isinstance(labels, LabelMap) else np.asarray(labels)
    h, w = grid.shape
    rows = np.minimum(((np.arange(target_h) + 0.5) * h / target_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(target_w) + 0.5) * w / target_w).astype(int), w - 1)
    out = grid[np.ix_(rows, cols)]
    if isinstance(labels, LabelMap):
        return LabelMap(out, labels.num_classes, list(labels.class_names))
    return out


def load_corpus(manifest: DatasetManifest, class_names: Sequence[str] | None = None):
    """Load every entry as ``(ImageSlice, LabelMap | None)``, sorted by subject, modality, slice."""
    names = list(class_names or PHANTOM_CLASSES)
    res = manifest.resolution
    counter: dict[tuple[str, int], int] = defaultdict(int)
    items = []
    for e in manifest.entries:
        img = _read_array(manifest.resolve(e.image_path))
        lab = None
        if e.label_path is not None:
            lab = _read_array(manifest.resolve(e.label_path))
            if lab.shape != img.shape:
                raise ValidationError(f"label {e.label_path} has shape {lab.shape}, image {e.image_path} has {img.shape}")
        key = (e.subject_id, int(e.modality_id))
        idx = counter[key]
        counter[key] += 1
        img = rescale_minmax(resize_image(img, res, res))
        sl = ImageSlice(img, e.subject_id, int(e.modality_id), idx)
        lm = None
        if lab is not None:
            lab = downsample_labels(lab, res, res) if lab.shape != (res, res) else lab
            lm = LabelMap(lab.astype(np.uint8), max(len(names), int(lab.max()) + 1), names)
        items.append(((e.subject_id, int(e.modality_id), idx), sl, lm))
    items.sort(key=lambda t: t[0])
    return [(sl, lm) for _, sl, lm in items]


def save_array(path, arr) -> None:
    with open(path, "wb") as fh:
        np.save(fh, arr, allow_pickle=False)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def phantom_labels(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Nested ellipses: CSF shell, GM ring, WM core, plus two CSF ventricles."""
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) / resolution
    cy, cx = 0.5 + rng.uniform(-0.04, 0.04, size=2)
    theta = rng.uniform(-0.3, 0.3)
    ry, rx = rng.uniform(0.38, 0.44), rng.uniform(0.30, 0.38)
    lab = np.zeros((resolution, resolution), dtype=np.uint8)
    lab[_ellipse(yy, xx, cy, cx, ry, rx, theta)] = 1
    g = rng.uniform(0.86, 0.92)
    lab[_ellipse(yy, xx, cy, cx, ry * g, rx * g, theta)] = 2
    w = g * rng.uniform(0.62, 0.74)
    lab[_ellipse(yy, xx, cy, cx, ry * w, rx * w, theta)] = 3
    for side in (-1, 1):
        vy = cy + rng.uniform(-0.04, 0.04)
        vx = cx + side * rng.uniform(0.05, 0.09)
        lab[_ellipse(yy, xx, vy, vx, rng.uniform(0.07, 0.12), rng.uniform(0.025, 0.045),
                     theta + side * rng.uniform(0.1, 0.4))] = 1
    return lab


def render_phantom(labels: np.ndarray, modality: int, rng: np.random.Generator) -> np.ndarray:
    """Per-class intensities with a smooth multiplicative bias field and Gaussian noise."""
    n = labels.shape[0]
    base = PHANTOM_CONTRAST[modality] + rng.uniform(-0.03, 0.03, size=4)
    img = base[labels]
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n - 0.5
    a, b, c = rng.uniform(-0.15, 0.15, size=3)
    img = img * (1.0 + a * yy + b * xx + c * yy * xx)
    img = img + rng.normal(0.0, PHANTOM_NOISE, size=img.shape)
    return img.astype(np.float32)


def make_phantom_corpus(seed: int, n_subjects: int, resolution: int, out_dir, test_fraction: float = 0.2):
    """Write a two-modality phantom dataset; returns ``(train_manifest, test_manifest)``.

    The output is a pure function of ``(seed, n_subjects, resolution)``.
    Both modalities of a subject share one label file.
    """
    if n_subjects < 2:
        raise ValidationError("need at least two subjects")
    if resolution < 32:
        raise ValidationError("resolution must be at least 32")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    n_test = min(max(1, round(n_subjects * test_fraction)), n_subjects - 1)
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    splits: dict[str, list[ManifestEntry]] = {"train": [], "test": []}
    for k in range(n_subjects):
        rng = np.random.default_rng(children[k])
        sid = f"sub-{k:03d}"
        labels = phantom_labels(rng, resolution)
        label_rel = f"labels/{sid}.npy"
        save_array(out / label_rel, labels)
        split = "test" if k >= n_subjects - n_test else "train"
        for mod in (0, 1):
            img_rel = f"images/{sid}_mod-{mod}.npy"
            save_array(out / img_rel, render_phantom(labels, mod, rng))
            splits[split].append(ManifestEntry(img_rel, label_rel, sid, mod))
    manifests = []
    for split in ("train", "test"):
        man = DatasetManifest(splits[split], split, resolution, root=out)
        man.save(out / f"{split}.json")
        manifests.append(man)
    return tuple(manifests)
