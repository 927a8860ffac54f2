"""Small image I/O helpers shared by the pipeline stages."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError


def load_rgb(path: str | Path) -> np.ndarray:
    """Load an image as an (H, W, 3) uint8 RGB array."""
    p = Path(path)
    if not p.is_file():
        raise DatasetError(f"image not found: {p}")
    with Image.open(p) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_rgb(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) array, got shape {arr.shape}")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(p, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    """Load a binary mask as an (H, W) bool array; any nonzero pixel is foreground."""
    p = Path(path)
    if not p.is_file():
        raise DatasetError(f"mask not found: {p}")
    with Image.open(p) as img:
        return np.asarray(img.convert("L")) > 0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(p, format="PNG")


def save_gray16(path: str | Path, values: np.ndarray) -> None:
    """Write an (H, W) uint16 array as a 16-bit grayscale PNG."""
    arr = np.asarray(values, dtype=np.uint16)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(p, format="PNG")


def load_gray16(path: str | Path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DatasetError(f"file not found: {p}")
    with Image.open(p) as img:
        return np.asarray(img, dtype=np.uint16)
