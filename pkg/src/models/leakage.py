"""Leakage localization models."""

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field

from src.utils.arrays import BoolArray, FloatArray

LocalizationMode = Literal["in-generation", "post-hoc"]

SIMILARITY_BOUND = 1.0 + 1e-6


@dataclass(frozen=True)
class RefinedSubjectMap:
    """Normalized subject attention restricted to the description mask."""

    weights: FloatArray

    def __post_init__(self) -> None:
        if np.any(self.weights < 0):
            raise ValueError("refined weights must be nonnegative")
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-6):
            raise ValueError("refined weights must sum to 1")


@dataclass(frozen=True)
class SubjectRepresentation:
    """Pooled subject vector per bottleneck layer."""

    vectors: Mapping[str, FloatArray]

    def __post_init__(self) -> None:
        for layer_id, vector in self.vectors.items():
            if vector.ndim != 1 or not np.all(np.isfinite(vector)):
                raise ValueError(f"{layer_id}: representation must be a finite vector")


@dataclass(frozen=True)
class SimilarityMap:
    """Per-patch cosine similarity averaged over bottleneck layers."""

    values: FloatArray

    def __post_init__(self) -> None:
        if np.any(np.abs(self.values) > SIMILARITY_BOUND):
            raise ValueError("similarity values must lie in [-1, 1]")

    @property
    def grid(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))


@dataclass(frozen=True)
class LeakageReport:
    """Per-patch leak map and overall verdict."""

    leak_map: BoolArray
    c_ref: SimilarityMap
    c_tgt: SimilarityMap
    t_leak: float
    t_rel: float
    mode: LocalizationMode
    step: int
    diagnostics: tuple[str, ...] = field(default=())

    @property
    def overall(self) -> bool:
        return bool(self.leak_map.any())

    @property
    def leak_patches(self) -> int:
        return int(self.leak_map.sum())

    @classmethod
    def no_leak(
        cls,
        grid: tuple[int, int],
        t_leak: float,
        t_rel: float,
        mode: LocalizationMode,
        step: int,
        diagnostics: tuple[str, ...],
    ) -> "LeakageReport":
        """Clean verdict used when a subject cannot be localized."""
        zeros = np.zeros(grid)
        return cls(
            leak_map=np.zeros(grid, dtype=bool),
            c_ref=SimilarityMap(zeros),
            c_tgt=SimilarityMap(zeros.copy()),
            t_leak=t_leak,
            t_rel=t_rel,
            mode=mode,
            step=step,
            diagnostics=diagnostics,
        )

    def difference_map(self) -> FloatArray:
        """``L * (C_ref - C_tgt)`` for overlays."""
        return np.where(self.leak_map, self.c_ref.values - self.c_tgt.values, 0.0)

    def to_document(self, arrays_file: Optional[str] = None) -> "LeakageReportDocument":
        return LeakageReportDocument(
            leakage=self.overall,
            leak_patches=self.leak_patches,
            t_leak=self.t_leak,
            t_rel=self.t_rel,
            mode=self.mode,
            step=self.step,
            grid=(int(self.leak_map.shape[0]), int(self.leak_map.shape[1])),
            diagnostics=list(self.diagnostics),
            arrays_file=arrays_file,
        )


class LeakageReportDocument(BaseModel):
    """Serialized leakage report; arrays live in a sibling ``.npz`` file."""

    leakage: bool = Field(..., description="True if any patch leaks")
    leak_patches: int = Field(..., ge=0)
    t_leak: float
    t_rel: float
    mode: LocalizationMode
    step: int
    grid: tuple[int, int]
    diagnostics: list[str] = Field(default_factory=list)
    arrays_file: Optional[str] = Field(
        None, description="Container with c_ref, c_tgt and leak_map arrays"
    )


class LeakageSummary(LeakageReportDocument):
    """Leakage report returned by the HTTP API."""

    leak_map: list[list[bool]] = Field(default_factory=list)
