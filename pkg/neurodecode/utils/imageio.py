"""8-bit image conversion, PPM files and comparison montages."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import numpy as np
from PIL import Image

from neurodecode.utils.errors import DimensionError

MID_GREY = 127.5


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] images to the 8-bit grid (float values in 0..255)."""
    return np.rint(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0)


def from_uint8(images: np.ndarray) -> np.ndarray:
    """Map 8-bit values back to [0, 1]."""
    return np.asarray(images, dtype=np.float64) / 255.0


def quantize(images: np.ndarray) -> np.ndarray:
    """Round-trip [0, 1] images through 8 bits."""
    return from_uint8(to_uint8(images))


def write_ppm(path: str | Path, image: np.ndarray) -> Path:
    """Write a ``[3, H, W]`` image in [0, 1] as binary PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"write_ppm expects a [3, H, W] image, got {image.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(image).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(pixels).save(path, format="PPM")
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a PPM file into a ``[3, H, W]`` image in [0, 1]."""
    with Image.open(path) as handle:
        pixels = np.asarray(handle.convert("RGB"), dtype=np.float64)
    return from_uint8(pixels.transpose(2, 0, 1))


def placeholder(size: int) -> np.ndarray:
    """Mid-grey ``[3, size, size]`` panel standing in for a missing stage."""
    return np.full((3, size, size), MID_GREY / 255.0)


def montage(panels: Sequence[np.ndarray | None], size: int | None = None) -> np.ndarray:
    """Place ``[3, S, S]`` panels side by side; ``None`` panels become placeholders."""
    present = [panel for panel in panels if panel is not None]
    if size is None:
        if not present:
            raise DimensionError("montage needs a panel size when every panel is missing")
        size = present[0].shape[-1]
    filled = [placeholder(size) if panel is None else np.asarray(panel) for panel in panels]
    for panel in filled:
        if panel.shape != (3, size, size):
            raise DimensionError(f"montage panels must be [3, {size}, {size}], got {panel.shape}")
    return np.concatenate(filled, axis=2)
