"""Array helpers shared by the services."""

from pathlib import Path

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]


def resample_nearest(grid: NDArray, shape: tuple[int, int]) -> NDArray:
    """Nearest-neighbour resample of the two leading axes of ``grid``.

    Args:
        grid: Array shaped ``(H, W, ...)``
        shape: Target ``(H', W')``

    Returns:
        Array shaped ``(H', W', ...)`` with the same dtype
    """
    height, width = grid.shape[:2]
    target_h, target_w = shape
    if (height, width) == (target_h, target_w):
        return grid
    rows = np.minimum(((np.arange(target_h) + 0.5) * height / target_h).astype(int), height - 1)
    cols = np.minimum(((np.arange(target_w) + 0.5) * width / target_w).astype(int), width - 1)
    return grid[rows][:, cols]


def save_arrays(path: Path, **arrays: NDArray) -> Path:
    """Write named arrays to an ``.npz`` container.

    Floats are stored as little-endian float32 and masks as 8-bit booleans.
    """
    payload: dict[str, NDArray] = {}
    for name, array in arrays.items():
        if array.dtype == np.bool_:
            payload[name] = array.astype("|b1")
        else:
            payload[name] = np.asarray(array, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        np.savez(handle, **payload)
    return path


def load_arrays(path: Path) -> dict[str, NDArray]:
    """Read every array stored by :func:`save_arrays`."""
    with np.load(path) as data:
        return {name: data[name] for name in data.files}
