"""Image fidelity (PSNR, SSIM) and structure fidelity (Dice, volumetric similarity)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

PSNR_SENTINEL_DB = 99.0
DATA_RANGE = 2.0


def _pixels(x) -> np.ndarray:
    if hasattr(x, "pixels"):
        x = x.pixels
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(ref, test, data_range: float = DATA_RANGE) -> float:
    a, b = _pixels(ref), _pixels(test)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_SENTINEL_DB
    return float(10.0 * np.log10(data_range ** 2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(ref, test, window: int = 11, sigma: float = 1.5, data_range: float = DATA_RANGE,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows."""
    a, b = _pixels(ref), _pixels(test)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)

    def filt(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        return ndimage.correlate1d(x, g, axis=1, mode="constant")

    pad = window // 2
    crop = (slice(pad, a.shape[0] - pad), slice(pad, a.shape[1] - pad))
    mu_a, mu_b = filt(a)[crop], filt(b)[crop]
    var_a = filt(a * a)[crop] - mu_a ** 2
    var_b = filt(b * b)[crop] - mu_b ** 2
    cov = filt(a * b)[crop] - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


def dice(ref_mask, test_mask) -> float:
    a = np.asarray(ref_mask, dtype=bool)
    b = np.asarray(test_mask, dtype=bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def vol_similarity(ref_mask, test_mask) -> float:
    na = int(np.asarray(ref_mask, dtype=bool).sum())
    nb = int(np.asarray(test_mask, dtype=bool).sum())
    if na + nb == 0:
        return 1.0
    # 1 - |na - nb| / (na + nb), written so it is never rounded below the Dice score
    return float(2 * min(na, nb) / (na + nb))


@dataclass
class ClassScore:
    dice: float
    vol_similarity: float
    absent: bool = False


@dataclass
class MetricReport:
    psnr_db: float = float("nan")
    ssim: float = float("nan")
    per_class: dict[str, ClassScore] = field(default_factory=dict)
    n_samples: int = 1

    @property
    def mean_dice(self) -> float:
        scores = [c.dice for c in self.per_class.values() if not c.absent]
        return float(np.mean(scores)) if scores else float("nan")

    def to_json(self) -> str:
        data = asdict(self)
        data["units"] = {"psnr_db": "dB", "ssim": "unitless", "dice": "fraction", "vol_similarity": "fraction"}
        return json.dumps(data, indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        data.pop("units", None)
        data["per_class"] = {k: ClassScore(**v) for k, v in data["per_class"].items()}
        return cls(**data)


class ToySegmenter:
    """Nearest class-mean intensity classifier for phantom-style images.

    With sorted class means this is an interval classifier with thresholds
    at the midpoints between neighbouring means.
    """

    def __init__(self, class_means: Sequence[float]):
        self.class_means = np.asarray(class_means, dtype=np.float64)

    @classmethod
    def fit(cls, images, labels, num_classes: int) -> "ToySegmenter":
        sums = np.zeros(num_classes)
        counts = np.zeros(num_classes)
        for img, lab in zip(images, labels):
            px, lb = _pixels(img).ravel(), np.asarray(getattr(lab, "classes", lab)).ravel()
            sums += np.bincount(lb, weights=px, minlength=num_classes)[:num_classes]
            counts += np.bincount(lb, minlength=num_classes)[:num_classes]
        if np.any(counts == 0):
            raise ValueError("every class needs calibration pixels")
        return cls(sums / counts)

    def __call__(self, image) -> np.ndarray:
        px = _pixels(image)
        return np.abs(px[..., None] - self.class_means).argmin(axis=-1).astype(np.uint8)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.class_means]


def class_scores(reference_labels, predicted_labels, class_names: Sequence[str]) -> dict[str, ClassScore]:
    ref = np.asarray(reference_labels)
    pred = np.asarray(predicted_labels)
    out = {}
    for c, name in enumerate(class_names):
        a, b = ref == c, pred == c
        absent = not a.any() and not b.any()
        out[name] = ClassScore(dice(a, b), vol_similarity(a, b), absent)
    return out


def voxel_analysis(translated, labels, segmenter: Callable, reference=None) -> MetricReport:
    """Segment a translated image and score each class against the ground-truth labels."""
    try:
        pred = segmenter(translated)
    except Exception as exc:
        sid = getattr(translated, "subject_id", "?")
        raise RuntimeError(f"segmenter failed on subject {sid}: {exc}") from exc
    report = MetricReport(per_class=class_scores(labels.classes, pred, labels.class_names))
    if reference is not None:
        report.psnr_db = psnr(reference, translated)
        report.ssim = ssim(reference, translated)
    return report


def export_embeddings(contents, path) -> int:
    """Write per-structure mean content vectors, one CSV row per (sample, class).

    ``contents`` is a sequence of ``(sample_id, content (C, H, W), labels (H, W))``.
    Returns the number of rows written.
    """
    rows = 0
    with open(Path(path), "w", newline="") as fh:
        writer = None
        for sample_id, z, lab in contents:
            z = _pixels(z)
            lab = np.asarray(getattr(lab, "classes", lab))
            if writer is None:
                writer = csv.writer(fh)
                writer.writerow(["sample_id", "class"] + [f"f{i}" for i in range(z.shape[0])])
            for c in np.unique(lab):
                vec = z[:, lab == c].mean(axis=1)
                writer.writerow([sample_id, int(c)] + [f"{v:.8g}" for v in vec])
                rows += 1
    return rows


def load_embeddings(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    classes = np.array([int(r[1]) for r in body], dtype=int)
    feats = np.array([[float(v) for v in r[2:]] for r in body])
    return ids, classes, feats


def write_metric_rows(rows: Sequence[dict], path, class_names: Sequence[str] = ()) -> None:
    """One CSV row per (subject, direction); column names carry units."""
    header = ["subject_id", "direction", "psnr_db", "ssim"]
    for name in class_names:
        header += [f"dice_{name}_fraction", f"vs_{name}_fraction"]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) and math.isfinite(v) else v)
                             for k, v in row.items()})
