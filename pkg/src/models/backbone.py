"""Models exchanged with the diffusion backbone."""

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.exceptions import DimensionMismatchError, MissingCaptureError
from src.models.attention import AttentionTensors
from src.models.prompts import PromptSpec
from src.utils.arrays import BoolArray, FloatArray

Provenance = Literal["generated", "inverted"]
ScalingScope = Literal["all", "bottleneck"]

ROW_SUM_TOLERANCE = 1e-5


class BackboneConfig(BaseModel):
    """Denoising loop geometry shared by every backbone."""

    model_config = ConfigDict(frozen=True)

    total_steps: int = Field(50, ge=2, description="Denoising iterations T")
    bottleneck_layer_ids: tuple[str, ...] = Field(
        ..., min_length=1, description="Bottleneck attention layers B"
    )
    latent_grid: tuple[int, int] = Field(..., description="Bottleneck patch grid (H, W)")
    head_count: int = Field(1, ge=1)
    seed: int = 0

    @field_validator("latent_grid")
    @classmethod
    def _positive_grid(cls, value: tuple[int, int]) -> tuple[int, int]:
        if value[0] < 1 or value[1] < 1:
            raise ValueError("latent grid must be at least 1x1")
        return value

    @property
    def localization_step(self) -> int:
        """Step ``ceil(T / 2)`` at which half generations stop."""
        return math.ceil(self.total_steps / 2)


@dataclass(frozen=True)
class AttentionRecord:
    """Head-averaged cross-attention probabilities of one layer at one step."""

    layer_id: str
    step: int
    grid: tuple[int, int]
    probs: FloatArray

    def __post_init__(self) -> None:
        height, width = self.grid
        if self.probs.ndim != 2 or self.probs.shape[0] != height * width:
            raise DimensionMismatchError(
                f"{self.layer_id}: probs {self.probs.shape} do not fit grid {self.grid}"
            )
        if np.any(self.probs < 0):
            raise ValueError(f"{self.layer_id}: negative attention probability")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=ROW_SUM_TOLERANCE):
            raise ValueError(f"{self.layer_id}: attention rows must sum to 1")

    @property
    def token_count(self) -> int:
        return int(self.probs.shape[1])


@dataclass(frozen=True)
class FeatureStack:
    """Pre-self-attention feature maps ``[H, W, d]`` per bottleneck layer."""

    step: int
    layers: Mapping[str, FloatArray]

    def __post_init__(self) -> None:
        for layer_id, features in self.layers.items():
            if features.ndim != 3:
                raise DimensionMismatchError(f"{layer_id}: features must be [H, W, d]")
            if not np.all(np.isfinite(features)):
                raise ValueError(f"{layer_id}: non-finite features")


@dataclass(frozen=True)
class LatentPair:
    """Latents entering the final two denoising steps."""

    z_prev: FloatArray  # input to step T - 1
    z_last: FloatArray  # input to step T
    provenance: Provenance
    final_step: int

    def __post_init__(self) -> None:
        if self.z_prev.shape != self.z_last.shape:
            raise DimensionMismatchError("latent pair shapes differ")


@dataclass(frozen=True)
class LatentTrajectory:
    """Full latent trajectory; ``states[t]`` is the latent after step ``t``."""

    states: tuple[FloatArray, ...]
    provenance: Provenance

    @property
    def total_steps(self) -> int:
        return len(self.states) - 1


@dataclass(frozen=True)
class ReferenceTrace:
    """Reference self-attention tensors cached per ``(step, layer_id)``."""

    prompt: PromptSpec
    tensors: Mapping[tuple[int, str], AttentionTensors]

    def at(self, step: int, layer_id: str) -> AttentionTensors:
        try:
            return self.tensors[(step, layer_id)]
        except KeyError as exc:
            raise MissingCaptureError(
                f"reference trace has no tensors for step {step}, layer {layer_id}"
            ) from exc


@dataclass(frozen=True)
class AttentionControl:
    """Shared-attention control: replayed reference plus scaled subject masks.

    ``masks[i]`` is the bottleneck-grid subject mask of a reference subject and
    ``alphas[i]`` its key scale. Where masks overlap the smallest scale wins.
    """

    reference: ReferenceTrace
    masks: tuple[BoolArray, ...] = ()
    alphas: tuple[float, ...] = ()
    scope: ScalingScope = "all"

    def __post_init__(self) -> None:
        if len(self.masks) != len(self.alphas):
            raise ValueError("one alpha is required per mask")
        for alpha in self.alphas:
            if not 0.0 <= alpha <= 1.0:
                raise ValueError(f"alpha {alpha} outside [0, 1]")

    def scale_map(self, grid: tuple[int, int]) -> FloatArray:
        """Per-patch key scale on the bottleneck grid."""
        scale = np.ones(grid)
        for mask, alpha in zip(self.masks, self.alphas, strict=True):
            if mask.shape != grid:
                raise DimensionMismatchError(f"mask {mask.shape} does not match grid {grid}")
            scale = np.where(mask, np.minimum(scale, alpha), scale)
        return scale

    def union_mask(self, grid: tuple[int, int]) -> BoolArray:
        union = np.zeros(grid, dtype=bool)
        for mask in self.masks:
            union |= mask
        return union


@dataclass(frozen=True)
class PartialState:
    """Resumable state of a generation stopped early."""

    prompt: PromptSpec
    control: Optional[AttentionControl]
    seed: int
    step: int
    state: Any


@dataclass
class GenerationResult:
    """Everything a generation run produced."""

    prompt: PromptSpec
    completed_steps: int
    image: Optional[FloatArray]
    records: list[AttentionRecord] = field(default_factory=list)
    features: dict[int, FeatureStack] = field(default_factory=dict)
    self_attention: dict[tuple[int, str], AttentionTensors] = field(default_factory=dict)
    reference_mass: dict[tuple[int, str], float] = field(default_factory=dict)
    scaled_layers: tuple[str, ...] = ()
    partial: Optional[PartialState] = None
    provenance: Provenance = "generated"

    def records_at(self, step: int) -> list[AttentionRecord]:
        records = [record for record in self.records if record.step == step]
        if not records:
            raise MissingCaptureError(f"no cross-attention captured at step {step}")
        return records

    def features_at(self, step: int) -> FeatureStack:
        try:
            return self.features[step]
        except KeyError as exc:
            raise MissingCaptureError(f"no features captured at step {step}") from exc

    def reference_trace(self) -> ReferenceTrace:
        if not self.self_attention:
            raise MissingCaptureError("self-attention was not captured for this run")
        return ReferenceTrace(prompt=self.prompt, tensors=dict(self.self_attention))
