"""Image file helpers."""

import io
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, UnidentifiedImageError

from src.exceptions import ImageDecodeError
from src.utils.arrays import BoolArray, FloatArray


def _to_float(image: Image.Image) -> FloatArray:
    return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0


def load_image(path: Path) -> FloatArray:
    """Read an image as float RGB in [0, 1], shaped ``[H, W, 3]``.

    Raises:
        ImageDecodeError: If the file is missing or not an image
    """
    try:
        with Image.open(path) as image:
            return _to_float(image)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot read image {path}: {exc}") from exc


def decode_image_bytes(content: bytes) -> FloatArray:
    """Decode uploaded image bytes."""
    try:
        with Image.open(io.BytesIO(content)) as image:
            return _to_float(image)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}") from exc


def to_uint8(image: FloatArray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: Path, image: FloatArray) -> Path:
    """Write a float RGB image as an 8-bit PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def save_mask(path: Path, bits: BoolArray, scale: int = 8) -> Path:
    """Write a patch mask as a grayscale PNG, upscaled for inspection."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.kron(bits.astype(np.uint8) * 255, np.ones((scale, scale), dtype=np.uint8))
    Image.fromarray(pixels).save(path)
    return path


def save_overlay(
    path: Path,
    image: FloatArray,
    difference: FloatArray,
    opacity: float = 0.6,
    colormap: str = "inferno",
) -> Path:
    """Blend a patch-level difference map over an image.

    Args:
        path: Output PNG path
        image: Float RGB image
        difference: Patch map, e.g. the similarity difference on leaking patches
        opacity: Weight of the colour map where the map is nonzero
        colormap: Matplotlib colormap name
    """
    height, width = image.shape[:2]
    rows = (np.arange(height) * difference.shape[0]) // height
    cols = (np.arange(width) * difference.shape[1]) // width
    upsampled = difference[rows][:, cols]
    peak = float(np.abs(upsampled).max())
    normalized = np.abs(upsampled) / peak if peak > 0 else np.zeros_like(upsampled)
    colours = colormaps[colormap](normalized)[..., :3]
    weight = (normalized > 0)[..., None] * opacity
    return save_image(path, (1.0 - weight) * image + weight * colours)
