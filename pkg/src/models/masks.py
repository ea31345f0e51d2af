"""Subject map and mask models."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.utils.arrays import BoolArray, FloatArray


@dataclass(frozen=True)
class SubjectMap:
    """Cross-attention mass of one subject token on the bottleneck grid."""

    values: FloatArray
    token_index: int
    steps_aggregated: tuple[int, int]
    layer_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("subject map must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("subject map has non-finite values")

    @property
    def grid(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))


@dataclass(frozen=True)
class KMeansResult:
    """Exact 1-D k-means partition; labels ordered by ascending centroid."""

    labels: np.ndarray
    centroids: FloatArray
    sse: float
    degenerate: bool

    @property
    def cluster_count(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def top_label(self) -> int:
        return self.cluster_count - 1


@dataclass(frozen=True)
class SubjectMask:
    """Coarse mask of the patches tied to a subject."""

    bits: BoolArray
    threshold: Optional[float]
    closing_applied: bool
    diagnostic: Optional[str] = None

    @property
    def empty(self) -> bool:
        return not bool(self.bits.any())


@dataclass(frozen=True)
class DescriptionMask:
    """Fine description mask used to pool a subject representation."""

    bits: BoolArray
    capped: bool
    diagnostic: Optional[str] = None

    @property
    def empty(self) -> bool:
        return not bool(self.bits.any())
