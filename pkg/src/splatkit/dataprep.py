"""Dataset preparation: frame sampling, masking, square cropping, splitting."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import DataError, ShapeMismatch, TooFewFrames
from .metrics import binarize

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def sample_frame_indices(total_frames: int, k: int) -> List[int]:
    """``k`` evenly spaced frame indices: floor(i * total / k)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if total_frames < k:
        raise TooFewFrames(f"cannot sample {k} frames from {total_frames}")
    return [(i * total_frames) // k for i in range(k)]


def list_frames(directory) -> List[Path]:
    """Pre-extracted frame files of one video, in name order."""
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def sample_frames(directory, k: int = 30) -> List[Path]:
    frames = list_frames(directory)
    return [frames[i] for i in sample_frame_indices(len(frames), k)]


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split ratios must be non-negative")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")


def split_by_video(video_ids: Iterable, ratios: SplitRatios = SplitRatios(), seed: int = 0) -> Dict:
    """Assign whole videos to train/val/test.

    The sorted unique ids are shuffled with ``seed``; the first
    floor(train * n) go to train, the next floor(val * n) to val and the
    remainder to test.
    """
    ids = sorted(set(video_ids))
    n = len(ids)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(ratios.train * n + 1e-9))
    n_val = int(np.floor(ratios.val * n + 1e-9))
    out = {}
    for rank, j in enumerate(perm):
        if rank < n_train:
            out[ids[j]] = "train"
        elif rank < n_train + n_val:
            out[ids[j]] = "val"
        else:
            out[ids[j]] = "test"
    return out


def apply_mask(image, mask, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Keep pixels where mask >= 0.5, paint the rest with ``background``."""
    image = np.asarray(image)
    keep = binarize(mask)
    if keep.shape != image.shape[:2]:
        raise ShapeMismatch(f"mask {keep.shape} does not match image {image.shape[:2]}")
    bg = np.asarray(background, dtype=image.dtype if image.dtype.kind == "f" else np.float64)
    if image.dtype == np.uint8 and bg.dtype.kind == "f":
        bg = np.round(255.0 * bg).astype(np.uint8)
    out = np.empty_like(image)
    out[...] = bg
    out[keep] = image[keep]
    return out


def square_crop_offsets(height: int, width: int):
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side


def crop_square(image, camera=None):
    """Centre crop to the largest square.

    Returns the cropped image, or ``(image, camera)`` when a camera is given;
    the camera's principal point is shifted by the crop offsets.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    top, left, side = square_crop_offsets(h, w)
    out = image[top:top + side, left:left + side]
    if camera is None:
        return out
    return out, crop_camera(camera, top, left, side)


def crop_camera(camera, top: int, left: int, side: int):
    """Camera (PinholeCamera or CameraIntrinsics) after a crop at (top, left)."""
    from .geometry import PinholeCamera

    if isinstance(camera, PinholeCamera):
        intr = camera.intrinsics
        new = intr.with_principal_point(intr.cx - left, intr.cy - top, side, side)
        return PinholeCamera(new, camera.pose)
    return camera.with_principal_point(camera.cx - left, camera.cy - top, side, side)


# ---------------------------------------------------------------------------
# manifest

MANIFEST_COLUMNS = ("video_id", "frame_index", "image_path", "mask_path", "split")


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    frame_index: int
    image_path: str
    mask_path: str = ""
    split: str = ""  # "" = unassigned

    def __post_init__(self):
        if self.split not in ("",) + SPLITS:
            raise DataError(f"unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    excluded: List[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen = set()
        video_split = {}
        for e in self.entries:
            key = (e.video_id, e.frame_index)
            if key in seen:
                raise DataError(f"duplicate manifest entry {key}")
            seen.add(key)
            if e.split:
                prev = video_split.setdefault(e.video_id, e.split)
                if prev != e.split:
                    raise DataError(f"video {e.video_id!r} appears in splits {prev!r} and {e.split!r}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_split(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def with_splits(self, assignment: Dict) -> "DatasetManifest":
        return DatasetManifest([replace(e, split=assignment[e.video_id]) for e in self.entries],
                               list(self.excluded))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in self.entries:
            w.writerow([e.video_id, e.frame_index, e.image_path, e.mask_path, e.split])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DatasetManifest":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
            raise DataError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}")
        entries = []
        for r in rows[1:]:
            if not r:
                continue
            if len(r) != len(MANIFEST_COLUMNS):
                raise DataError(f"manifest row has {len(r)} fields: {r}")
            try:
                idx = int(r[1])
            except ValueError:
                raise DataError(f"bad frame index {r[1]!r}") from None
            entries.append(ManifestEntry(r[0], idx, r[2], r[3], r[4]))
        return cls(entries)

    def save(self, path) -> None:
        from .utils.io import atomic_write_text
        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        from .errors import MissingFile
        path = Path(path)
        if not path.exists():
            raise MissingFile(f"{path} does not exist")
        return cls.from_csv(path.read_text())


def drop_empty_masks(manifest: DatasetManifest, read_mask) -> DatasetManifest:
    """Move entries whose mask has no foreground pixel to ``excluded``."""
    kept, dropped = [], list(manifest.excluded)
    for e in manifest.entries:
        if e.mask_path and not binarize(read_mask(e.mask_path)).any():
            dropped.append(e)
        else:
            kept.append(e)
    return DatasetManifest(kept, dropped)
