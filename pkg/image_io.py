"""
image_io.py — image files on disk.

Views are float arrays [3, S, S] in [0, 1]; segment maps are [1, S, S].
Everything is written as 8-bit binary PPM (P6) through Pillow; segment
maps are stored gray (the value replicated over RGB). Reading accepts
anything Pillow decodes (PPM, PNG, JPEG, ...).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from tensor_core import get_dtype

logger = logging.getLogger(__name__)

SEPARATOR = 2


class DataPathError(FileNotFoundError):
    """Raised when an image or dataset path does not exist."""


class ImageDecodeError(ValueError):
    """Raised when a file exists but cannot be decoded as an image."""


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[C, H, W] floats in [0, 1] -> [H, W, 3] uint8 (C = 1 is replicated)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected a [1|3, H, W] image, got shape {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_ppm(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(to_uint8(image))).save(path, format="PPM")
    return path


def _open(path: Path) -> Image.Image:
    if not path.is_file():
        raise DataPathError(f"image not found: {path}")
    try:
        img = Image.open(path)
        img.load()
    except UnidentifiedImageError:
        raise ImageDecodeError(f"cannot decode image: {path}") from None
    except OSError as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from None
    return img


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Decode to [3, S, S] floats in [0, 1], bilinear-resized to `size` if given."""
    img = _open(Path(path)).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).astype(get_dtype())


def load_segment(path: str | Path) -> np.ndarray:
    """Stored segment map -> [1, S, S] (first channel of the gray image)."""
    return load_image(path)[:1]


def load_external_image(path: str | Path, size: int) -> np.ndarray:
    """An arbitrary photo or render, ready to feed to the model. No pose is read."""
    image = load_image(path, size)
    logger.debug("Loaded external image %s as %dx%d", path, size, size)
    return image


# ---------------------------------------------------------------------------
# Mosaics
# ---------------------------------------------------------------------------

def mosaic(rows: Sequence[Sequence[np.ndarray]], separator: int = SEPARATOR) -> np.ndarray:
    """Tile equally sized [C, S, S] images into one [3, H, W] grid.

    Short rows are padded with blank cells; cells are separated by
    `separator` white pixels.
    """
    cells = [to_float_rgb(cell) for row in rows for cell in row]
    if not cells:
        raise ValueError("mosaic needs at least one image")
    h, w = cells[0].shape[1:]
    n_rows, n_cols = len(rows), max(len(row) for row in rows)
    out = np.ones((3, n_rows * h + (n_rows - 1) * separator, n_cols * w + (n_cols - 1) * separator))
    for r, row in enumerate(rows):
        for c, cell in enumerate(row):
            cell = to_float_rgb(cell)
            if cell.shape[1:] != (h, w):
                raise ValueError(f"mosaic cell {r},{c} has size {cell.shape[1:]}, expected {(h, w)}")
            top, left = r * (h + separator), c * (w + separator)
            out[:, top:top + h, left:left + w] = cell
        for c in range(len(row), n_cols):
            left = c * (w + separator)
            out[:, r * (h + separator):r * (h + separator) + h, left:left + w] = 0.0
    return out


def to_float_rgb(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.repeat(arr, 3, axis=0) if arr.shape[0] == 1 else arr


def save_mosaic(rows: Sequence[Sequence[np.ndarray]], path: str | Path) -> Path:
    return save_ppm(mosaic(rows), path)
