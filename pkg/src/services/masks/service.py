"""Subject maps from cross-attention and the masks derived from them."""

import logging
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy import ndimage

from src.exceptions import DimensionMismatchError
from src.models.backbone import AttentionRecord
from src.models.masks import DescriptionMask, KMeansResult, SubjectMap, SubjectMask
from src.utils.arrays import BoolArray, FloatArray

logger = logging.getLogger(__name__)

CLOSING_STRUCTURE = np.ones((3, 3), dtype=bool)
DESCRIPTION_FRACTION_DENOMINATOR = 10  # description masks keep at most 10% of the patches
NO_SUBJECT = "no subject localized"


def aggregate_subject_map(
    records: Sequence[AttentionRecord], token_index: int
) -> SubjectMap:
    """Average the subject-token column over records.

    Args:
        records: Cross-attention records over the chosen steps and layers
        token_index: Column of the subject token

    Returns:
        SubjectMap on the records' shared grid

    Raises:
        ValueError: If no records are given or the token index is out of range
        DimensionMismatchError: If records disagree on the grid
    """
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    grid = records[0].grid
    total = np.zeros(grid[0] * grid[1])
    for record in records:
        if record.grid != grid:
            raise DimensionMismatchError(
                f"record {record.layer_id}@{record.step} has grid {record.grid}, expected {grid}"
            )
        if not 0 <= token_index < record.token_count:
            raise ValueError(
                f"token index {token_index} outside {record.token_count} text tokens"
            )
        total += record.probs[:, token_index]
    values = np.clip(total / len(records), 0.0, 1.0).reshape(grid)
    steps = [record.step for record in records]
    layers = tuple(dict.fromkeys(record.layer_id for record in records))
    return SubjectMap(
        values=values,
        token_index=token_index,
        steps_aggregated=(min(steps), max(steps)),
        layer_ids=layers,
    )


def _segment_cost(prefix: FloatArray, prefix_sq: FloatArray, start: ArrayLike, stop: ArrayLike) -> FloatArray:
    count = np.asarray(stop) - np.asarray(start)
    total = prefix[stop] - prefix[start]
    return prefix_sq[stop] - prefix_sq[start] - total * total / count


def kmeans_1d(values: ArrayLike, k: int) -> KMeansResult:
    """Exact k-means on scalars for ``k`` in {2, 3}.

    The optimum of 1-D k-means is a partition of the sorted values at
    thresholds, so every admissible threshold is enumerated. Thresholds only
    fall between distinct values; equal values share a cluster. With fewer than
    ``k`` distinct values one cluster per distinct value is returned and the
    result is flagged degenerate.

    Args:
        values: Scalars to cluster
        k: Number of clusters, 2 or 3

    Returns:
        KMeansResult with labels ordered by ascending centroid
    """
    if k not in (2, 3):
        raise ValueError("k must be 2 or 3")
    data = np.asarray(values, dtype=np.float64).reshape(-1)
    if data.size == 0:
        raise ValueError("cannot cluster an empty value set")
    distinct = np.unique(data)
    if distinct.size <= k:
        labels = np.searchsorted(distinct, data)
        return KMeansResult(
            labels=labels,
            centroids=distinct.copy(),
            sse=0.0,
            degenerate=distinct.size < k,
        )

    order = np.argsort(data, kind="stable")
    ordered = data[order]
    n = ordered.size
    prefix = np.concatenate([[0.0], np.cumsum(ordered)])
    prefix_sq = np.concatenate([[0.0], np.cumsum(ordered * ordered)])
    # split position s puts ordered[:s] left of the threshold
    splits = np.flatnonzero(ordered[1:] > ordered[:-1]) + 1

    if k == 2:
        costs = _segment_cost(prefix, prefix_sq, 0, splits) + _segment_cost(
            prefix, prefix_sq, splits, n
        )
        best = int(np.argmin(costs))
        cuts = [int(splits[best])]
        sse = float(costs[best])
    else:
        best_cost = np.inf
        cuts = []
        for j, second in enumerate(splits[1:], start=1):
            firsts = splits[:j]
            costs = (
                _segment_cost(prefix, prefix_sq, 0, firsts)
                + _segment_cost(prefix, prefix_sq, firsts, second)
                + _segment_cost(prefix, prefix_sq, second, n)
            )
            i = int(np.argmin(costs))
            if costs[i] < best_cost:
                best_cost = float(costs[i])
                cuts = [int(firsts[i]), int(second)]
        sse = best_cost

    sorted_labels = np.zeros(n, dtype=int)
    for cut in cuts:
        sorted_labels[cut:] += 1
    labels = np.empty(n, dtype=int)
    labels[order] = sorted_labels
    bounds = [0, *cuts, n]
    centroids = np.array(
        [ordered[a:b].mean() for a, b in zip(bounds, bounds[1:])], dtype=np.float64
    )
    return KMeansResult(labels=labels, centroids=centroids, sse=max(sse, 0.0), degenerate=False)


def morphological_close(bits: ArrayLike) -> BoolArray:
    """Closing with a full 3x3 element.

    The grid is surrounded by false pixels, so a region touching the border is
    kept as is while a region one patch away from it does not grow onto it.
    """
    mask = np.asarray(bits, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    dilated = ndimage.binary_dilation(padded, structure=CLOSING_STRUCTURE, border_value=0)
    closed = ndimage.binary_erosion(dilated, structure=CLOSING_STRUCTURE, border_value=0)
    return closed[1:-1, 1:-1]



def extract_subject_mask(subject_map: SubjectMap) -> SubjectMask:
    """Subject mask: top cluster of a 2-means split, then closing."""
    values = subject_map.values
    clusters = kmeans_1d(values.reshape(-1), 2)
    if clusters.cluster_count < 2:
        logger.warning("Subject map for token %d is constant", subject_map.token_index)
        return SubjectMask(
            bits=np.zeros(values.shape, dtype=bool),
            threshold=None,
            closing_applied=False,
            diagnostic=NO_SUBJECT,
        )
    top = (clusters.labels == clusters.top_label).reshape(values.shape)
    threshold = float(values[top].min())
    return SubjectMask(
        bits=morphological_close(top), threshold=threshold, closing_applied=True
    )


def description_cap(grid: tuple[int, int]) -> int:
    """``ceil(0.10 * H * W)``."""
    return -(-grid[0] * grid[1] // DESCRIPTION_FRACTION_DENOMINATOR)


def extract_description_mask(subject_map: SubjectMap) -> DescriptionMask:
    """Description mask: top cluster of a 3-means split, capped at 10% of the patches."""
    values = subject_map.values
    flat = values.reshape(-1)
    clusters = kmeans_1d(flat, 3)
    if clusters.cluster_count < 2:
        return DescriptionMask(
            bits=np.zeros(values.shape, dtype=bool), capped=False, diagnostic=NO_SUBJECT
        )
    top = clusters.labels == clusters.top_label
    cap = description_cap(subject_map.grid)
    capped = int(top.sum()) > cap
    if capped:
        candidates = np.flatnonzero(top)
        # stable sort keeps row-major order among equal values
        ranked = candidates[np.argsort(-flat[candidates], kind="stable")]
        top = np.zeros_like(top)
        top[ranked[:cap]] = True
    return DescriptionMask(bits=top.reshape(values.shape), capped=capped)
