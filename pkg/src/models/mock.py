"""Configuration document for the mock backbone."""

from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from src.models.backbone import BackboneConfig


def default_backbone_config() -> BackboneConfig:
    return BackboneConfig(
        total_steps=10,
        bottleneck_layer_ids=("mid.0", "mid.1"),
        latent_grid=(12, 12),
        head_count=4,
        seed=0,
    )


class LeakProfile(BaseModel):
    """Leak weight g(alpha) injected into the target.

    Either a step profile (``low`` up to ``threshold``, ``high`` above it) or
    piecewise-linear ``knots`` of ``(alpha, weight)`` pairs.
    """

    threshold: Optional[float] = Field(None, ge=0.0, le=1.0)
    low: float = Field(0.0, ge=0.0, le=1.0)
    high: float = Field(0.9, ge=0.0, le=1.0)
    knots: Optional[list[tuple[float, float]]] = None

    @model_validator(mode="after")
    def _monotone(self) -> "LeakProfile":
        if self.knots is None:
            if self.threshold is None:
                raise ValueError("a leak profile needs a threshold or knots")
            if self.low > self.high:
                raise ValueError("leak weight must not decrease as alpha grows")
            return self
        if len(self.knots) < 2:
            raise ValueError("at least two knots are required")
        alphas = [alpha for alpha, _ in self.knots]
        weights = [weight for _, weight in self.knots]
        if any(not 0.0 <= a <= 1.0 for a in alphas) or any(
            not 0.0 <= w <= 1.0 for w in weights
        ):
            raise ValueError("knots must lie in [0, 1] x [0, 1]")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("knot alphas must be strictly increasing")
        if any(b < a for a, b in zip(weights, weights[1:])):
            raise ValueError("leak weight must not decrease as alpha grows")
        return self

    def weight(self, alpha: float) -> float:
        if self.knots is None:
            assert self.threshold is not None
            return self.high if alpha > self.threshold else self.low
        alphas, weights = zip(*self.knots)
        return float(np.interp(alpha, alphas, weights))


class PlantedLeak(BaseModel):
    """Reference subject that leaks into matching targets."""

    source: str = Field(..., description="Reference subject noun")
    target: str = Field("*", description="Target subject noun or '*' for any")
    profile: LeakProfile

    @classmethod
    def step(
        cls, source: str, threshold: float, target: str = "*", high: float = 0.9
    ) -> "PlantedLeak":
        """Leak iff alpha > threshold."""
        return cls(
            source=source,
            target=target,
            profile=LeakProfile(threshold=threshold, low=0.0, high=high),
        )


class MockSubject(BaseModel):
    """Subject with a planted region on the bottleneck grid."""

    noun: str = Field(..., min_length=1)
    region: list[int] = Field(
        default_factory=list,
        description="Row-major patch indices; empty gives a constant attention map",
    )
    prototype: Optional[list[float]] = None

    @field_validator("noun")
    @classmethod
    def _lower(cls, value: str) -> str:
        return value.lower()


class MockSpec(BaseModel):
    """Everything that defines a mock backbone."""

    backbone: BackboneConfig = Field(default_factory=default_backbone_config)
    feature_dim: int = Field(12, ge=2)
    head_dim: int = Field(8, ge=1)
    image_scale: int = Field(2, ge=1, description="Pixels per patch side")
    extra_layers: dict[str, tuple[int, int]] = Field(
        default_factory=lambda: {"up.0": (24, 24)},
        description="Shared self-attention layers outside the bottleneck",
    )
    subjects: list[MockSubject] = Field(default_factory=list)
    leaks: list[PlantedLeak] = Field(default_factory=list)
    auto_plant: bool = Field(True, description="Plant a region for undeclared subjects")
    noise_scale: float = Field(0.02, ge=0.0)
    style_gain: float = Field(0.01, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self) -> "MockSpec":
        height, width = self.backbone.latent_grid
        if self.feature_dim > 3 * self.image_scale**2:
            raise ValueError("feature_dim must fit in 3 * image_scale**2 pixel slots")
        if len(self.subjects) + 1 > self.feature_dim:
            raise ValueError("feature_dim too small for the declared subjects")
        for subject in self.subjects:
            if any(not 0 <= index < height * width for index in subject.region):
                raise ValueError(f"{subject.noun}: region index outside the grid")
            if subject.prototype is not None and len(subject.prototype) != self.feature_dim:
                raise ValueError(f"{subject.noun}: prototype must have feature_dim entries")
        overlap = set(self.extra_layers) & set(self.backbone.bottleneck_layer_ids)
        if overlap:
            raise ValueError(f"layers declared twice: {sorted(overlap)}")
        return self

    def leak_for(self, source: str, targets: list[str]) -> Optional[PlantedLeak]:
        """Planted leak from ``source`` into any of ``targets``."""
        for leak in self.leaks:
            if leak.source.lower() != source.lower():
                continue
            if leak.target == "*" or leak.target.lower() in targets:
                return leak
        return None

    @staticmethod
    def block(grid: tuple[int, int], top: int, left: int, height: int, width: int) -> list[int]:
        """Row-major indices of a rectangular block."""
        return [
            row * grid[1] + col
            for row in range(top, top + height)
            for col in range(left, left + width)
        ]
