"""Shared self-attention with masked reference key scaling."""

import logging
import math
from typing import Optional, Union

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import softmax

from src.exceptions import DimensionMismatchError
from src.models.attention import AttentionTensors
from src.utils.arrays import BoolArray, FloatArray, resample_nearest

logger = logging.getLogger(__name__)

ADAIN_EPS = 1e-5

Alpha = Union[float, ArrayLike]


def adain(x: FloatArray, y: FloatArray, eps: float = ADAIN_EPS) -> FloatArray:
    """Re-standardize ``x`` to the per-channel statistics of ``y``.

    Statistics are taken over rows (patches), one per channel.

    Args:
        x: Rows to normalize, ``[n, d]``
        y: Rows providing the target statistics, ``[m, d]``
        eps: Floor for the standard deviation of ``x``

    Returns:
        ``sigma(y) * (x - mu(x)) / sigma(x) + mu(y)``, shaped ``[n, d]``

    Raises:
        DimensionMismatchError: If channel counts differ or an input is empty
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionMismatchError(f"adain inputs {x.shape} and {y.shape} differ in width")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise DimensionMismatchError("adain needs at least one row in each input")
    mu_x = x.mean(axis=0, keepdims=True)
    sigma_x = np.maximum(x.std(axis=0, keepdims=True), eps)
    mu_y = y.mean(axis=0, keepdims=True)
    sigma_y = y.std(axis=0, keepdims=True)
    return sigma_y * ((x - mu_x) / sigma_x) + mu_y


def moment_rows(y: FloatArray) -> FloatArray:
    """Two rows with the per-channel mean and standard deviation of ``y``.

    ``adain(x, moment_rows(y))`` equals ``adain(x, y)``, so a reference whose
    rows are only ever used as AdaIN statistics can be stored this way.
    """
    if y.ndim != 2 or y.shape[0] == 0:
        raise DimensionMismatchError(f"moment rows need a non-empty [m, d] array, got {y.shape}")
    values = np.asarray(y, dtype=np.float64)
    mu = values.mean(axis=0)
    sigma = values.std(axis=0)
    return np.stack([mu - sigma, mu + sigma])


def _mask_column(
    mask: ArrayLike, rows: int, grid: Optional[tuple[int, int]]
) -> FloatArray:
    bits = np.asarray(mask, dtype=bool)
    if grid is not None and bits.ndim == 2 and bits.shape != grid:
        bits = resample_nearest(bits, grid)
    bits = bits.reshape(-1)
    if bits.shape[0] != rows:
        raise DimensionMismatchError(f"mask has {bits.shape[0]} entries for {rows} key rows")
    return bits.astype(np.float64)[:, None]


def _alpha_column(alpha: Alpha, rows: int, grid: Optional[tuple[int, int]]) -> Union[float, FloatArray]:
    values = np.asarray(alpha, dtype=np.float64)
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    if values.ndim == 0:
        return float(values)
    if grid is not None and values.ndim == 2 and values.shape != grid:
        values = resample_nearest(values, grid)
    values = values.reshape(-1)
    if values.shape[0] != rows:
        raise DimensionMismatchError(f"alpha has {values.shape[0]} entries for {rows} key rows")
    return values[:, None]


def scale_reference_keys(
    k_ref: FloatArray,
    mask: ArrayLike,
    alpha: Alpha,
    grid: Optional[tuple[int, int]] = None,
) -> FloatArray:
    """Scale the keys of masked reference patches.

    ``K_hat = (1 - mask) * K + alpha * mask * K`` row by row.

    Args:
        k_ref: Reference keys ``[m, d_k]``
        mask: Per-patch subject mask, flat or on a 2-D grid
        alpha: Scalar scale, or one scale per patch
        grid: Layer grid to resample a 2-D mask (and alpha map) to

    Returns:
        Scaled keys, bit-identical to ``k_ref`` when alpha is 1

    Raises:
        DimensionMismatchError: If the mask does not cover ``m`` rows
        ValueError: If alpha is outside [0, 1]
    """
    rows = k_ref.shape[0]
    r = _mask_column(mask, rows, grid)
    a = _alpha_column(alpha, rows, grid)
    return (1.0 - r) * k_ref + a * r * k_ref


def shared_attention_forward(
    target: AttentionTensors,
    reference: AttentionTensors,
    mask: Optional[ArrayLike] = None,
    alpha: Alpha = 1.0,
    grid: Optional[tuple[int, int]] = None,
    return_probs: bool = False,
) -> Union[FloatArray, tuple[FloatArray, FloatArray]]:
    """Attend from target queries to reference and target keys.

    Target queries and keys are AdaIN-normalized to the reference statistics and
    the reference keys under ``mask`` are scaled by ``alpha``. A reference with
    no patches falls back to plain self-attention over the target.

    Args:
        target: Target tensors
        reference: Reference tensors replayed for the same step and layer
        mask: Reference subject mask; ``None`` disables scaling
        alpha: Key scale, scalar or per patch
        grid: Layer grid used to resample 2-D masks
        return_probs: Also return the attention probabilities

    Returns:
        Output ``[n, d_v]``, optionally with probabilities ``[n, m + n]``
    """
    d_k = target.q.shape[1]
    if reference.patches == 0:
        queries, keys, values = target.q, target.k, target.v
    else:
        if reference.k.shape[1] != d_k or reference.v.shape[1] != target.v.shape[1]:
            raise DimensionMismatchError("reference and target heads are incompatible")
        queries = adain(target.q, reference.q)
        target_keys = adain(target.k, reference.k)
        reference_keys = (
            reference.k
            if mask is None
            else scale_reference_keys(reference.k, mask, alpha, grid)
        )
        keys = np.concatenate([reference_keys, target_keys], axis=0)
        values = np.concatenate([reference.v, target.v], axis=0)
    probs = softmax(queries @ keys.T / math.sqrt(d_k), axis=-1)
    output = probs @ values
    if return_probs:
        return output, probs
    return output


def reference_attention_mass(probs: FloatArray, mask: BoolArray) -> float:
    """Mean probability mass that target rows give to masked reference patches.

    Args:
        probs: Probabilities from :func:`shared_attention_forward`
        mask: Flat reference mask; its length is the reference patch count
    """
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    return float(probs[:, : flat.shape[0]][:, flat].sum(axis=1).mean())
