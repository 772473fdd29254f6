"""Small filesystem helpers."""
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import FormatError, MissingFile


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_image(path) -> np.ndarray:
    """8-bit image as float RGB in [0, 1], shape (H, W, 3)."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from None
    return arr / 255.0


def read_mask(path) -> np.ndarray:
    """Single-channel mask as float in [0, 1] (255 = foreground)."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise FormatError(f"cannot decode mask {path}: {exc}") from None
    return arr / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_png(path, image) -> None:
    """Write a float image in [0, 1] (or uint8) as an 8-bit PNG, atomically."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    import io
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
