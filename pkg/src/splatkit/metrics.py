"""Image and mask quality metrics: MSE, PSNR, IoU and batch evaluation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import EmptyEvalSet, ShapeMismatch


@dataclass(frozen=True, eq=False)
class ImagePair:
    original: np.ndarray
    reconstructed: np.ndarray
    max_value: float = 255.0

    def __post_init__(self):
        a = np.asarray(self.original, dtype=np.float64)
        b = np.asarray(self.reconstructed, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
        if not self.max_value > 0:
            raise ValueError("max_value must be positive")
        object.__setattr__(self, "original", a)
        object.__setattr__(self, "reconstructed", b)

    def mse(self) -> float:
        diff = self.original - self.reconstructed
        return float(np.mean(diff * diff))

    def psnr(self) -> float:
        return psnr_from_mse(self.mse(), self.max_value)


def mse(original, reconstructed) -> float:
    """Mean squared error over rows, columns and (if present) channels.

    Float inputs whose differences are all below about 1e-154 give 0, since
    their squares underflow; 8-bit images never do.
    """
    return ImagePair(original, reconstructed).mse()


def psnr_from_mse(mse_value: float, max_value: float = 255.0) -> float:
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse_value)


def psnr(original, reconstructed, max_value: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    return ImagePair(original, reconstructed, max_value).psnr()


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    """Foreground indicator; integer masks are read on a 0..255 scale."""
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    if np.issubdtype(m.dtype, np.integer):
        return m.astype(np.float64) / 255.0 >= threshold
    return m >= threshold


def confusion_counts(pred, truth, threshold: float = 0.5) -> ConfusionCounts:
    p = binarize(pred, threshold)
    t = binarize(truth, threshold)
    if p.shape != t.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {t.shape}")
    return ConfusionCounts(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)))


def iou_from_counts(counts: ConfusionCounts) -> float:
    union = counts.tp + counts.fp + counts.fn
    if union == 0:
        return 1.0  # both masks empty: perfect agreement
    return counts.tp / union


def iou(pred, truth, threshold: float = 0.5) -> float:
    return iou_from_counts(confusion_counts(pred, truth, threshold))


# ---------------------------------------------------------------------------
# model evaluation

@dataclass
class EvalReport:
    view_ids: List[str]
    psnrs: List[float]
    mean_psnr: float
    n_infinite: int
    masked: bool = False

    @property
    def n_views(self) -> int:
        return len(self.psnrs)

    def summary(self) -> dict:
        return {"mean_psnr": self.mean_psnr, "n_views": self.n_views,
                "n_infinite": self.n_infinite, "masked": self.masked}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["view_id", "psnr"])
        for vid, p in zip(self.view_ids, self.psnrs):
            w.writerow([vid, "inf" if math.isinf(p) else repr(p)])
        return buf.getvalue()

    def to_json(self) -> str:
        s = self.summary()
        if isinstance(s["mean_psnr"], float) and math.isnan(s["mean_psnr"]):
            s["mean_psnr"] = None
        return json.dumps(s, indent=2, sort_keys=True) + "\n"


def aggregate_psnr(values: Sequence[float]):
    """Mean over finite values; infinite ones are excluded and counted."""
    finite = [v for v in values if math.isfinite(v)]
    n_inf = len(values) - len(finite)
    mean = float(np.mean(finite)) if finite else math.inf
    return mean, n_inf


def masked_psnr(original, reconstructed, region, max_value: float = 1.0) -> float:
    """PSNR over the pixels where ``region`` is True only."""
    region = np.asarray(region, dtype=bool)
    a = np.asarray(original, dtype=np.float64)[region]
    b = np.asarray(reconstructed, dtype=np.float64)[region]
    if a.size == 0:
        return math.inf
    return psnr_from_mse(float(np.mean((a - b) ** 2)), max_value)


def evaluate_model(model, views, background=(0.0, 0.0, 0.0), masked: bool = False,
                   max_value: float = 1.0) -> EvalReport:
    """Render every view and score it against its mask-applied ground truth.

    ``model`` is a GaussianCloud or anything with a ``cloud`` attribute (a
    Checkpoint).  ``views`` are objects with ``image``, ``mask``, ``camera``
    and optionally ``name``.  With ``masked=True`` only pixels inside the
    union of the ground-truth mask and the rendered silhouette are scored.
    """
    from .dataprep import apply_mask
    from .rasterizer import render

    views = list(views)
    if not views:
        raise EmptyEvalSet("no views to evaluate")
    cloud = getattr(model, "cloud", model)
    ids, values = [], []
    for i, view in enumerate(views):
        target = apply_mask(view.image, view.mask, background)
        out = render(cloud, view.camera, background)
        if masked:
            region = binarize(view.mask) | (out.alpha >= 0.5)
            values.append(masked_psnr(target, out.color, region, max_value))
        else:
            values.append(psnr(target, out.color, max_value))
        ids.append(str(getattr(view, "name", None) or i))
    mean, n_inf = aggregate_psnr(values)
    return EvalReport(ids, values, mean, n_inf, masked)
