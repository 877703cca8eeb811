"""PNG image IO with a training-data hygiene guard.

All image reads in the package go through :func:`read_image` so that an
experiment can forbid access to its test split while the synthesis,
training, and bank-building stages run.
"""

from __future__ import annotations

import contextlib
from pathlib import Path

import cv2
import numpy as np

from .exceptions import DataError

# Paths forbidden for reading while a hygiene guard is active.
_FORBIDDEN: set[Path] = set()


@contextlib.contextmanager
def hygiene_guard(paths):
    """Forbid reads of `paths` within the context; violations raise DataError."""
    added = {Path(p).resolve() for p in paths}
    _FORBIDDEN.update(added)
    try:
        yield
    finally:
        _FORBIDDEN.difference_update(added)


def read_image(path) -> np.ndarray:
    """Read a PNG as 8-bit grayscale (RGB inputs are converted by luminance)."""
    path = Path(path)
    if path.resolve() in _FORBIDDEN:
        raise DataError(f"hygiene violation: read of held-out file {path}")
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise DataError(f"cannot read image: {path}")
    return img


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.asarray(img, dtype=np.uint8)):
        raise DataError(f"cannot write image: {path}")


def write_mask(path, mask: np.ndarray) -> None:
    """Store a boolean mask as a 0/255 PNG."""
    write_image(path, np.where(mask, 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    return read_image(path) > 127
