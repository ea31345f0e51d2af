"""Backbone plugin contract."""

from collections.abc import Mapping
from typing import Optional, Protocol, runtime_checkable

from src.exceptions import StepRangeError, UnknownLayerError
from src.models.backbone import (
    AttentionControl,
    BackboneConfig,
    GenerationResult,
    LatentPair,
    LatentTrajectory,
    PartialState,
)
from src.models.prompts import PromptSpec
from src.utils.arrays import FloatArray


@runtime_checkable
class Backbone(Protocol):
    """Capture-and-control interface over a text-to-image diffusion model.

    Implementations capture head-averaged cross-attention of the conditional
    branch at the bottleneck layers for every step, pre-self-attention features
    at every step, and optionally the self-attention tensors for replay.
    """

    config: BackboneConfig
    generation_calls: int

    def tokenize(self, text: str) -> list[str]:
        """Tokens of ``text``; index 0 is the start token."""
        ...

    def layer_grids(self) -> Mapping[str, tuple[int, int]]:
        """Patch grid of every shared self-attention layer."""
        ...

    def run_generation(
        self,
        prompt: PromptSpec,
        control: Optional[AttentionControl] = None,
        stop_at: Optional[int] = None,
        *,
        seed: Optional[int] = None,
        capture_self_attention: bool = False,
        resume: Optional[PartialState] = None,
        trajectory: Optional[LatentTrajectory] = None,
    ) -> GenerationResult:
        ...

    def ddim_invert(self, image: FloatArray, prompt: PromptSpec) -> LatentPair:
        ...

    def invert_trajectory(
        self, image: FloatArray, prompt: PromptSpec, seed: Optional[int] = None
    ) -> LatentTrajectory:
        ...

    def resimulate(self, latents: LatentPair, prompt: PromptSpec) -> GenerationResult:
        ...


def validate_stop_at(config: BackboneConfig, stop_at: Optional[int]) -> int:
    """Resolve ``stop_at`` to the last step to run.

    Raises:
        StepRangeError: If ``stop_at`` is outside ``[2, T]``
    """
    if stop_at is None:
        return config.total_steps
    if not 2 <= stop_at <= config.total_steps:
        raise StepRangeError(
            f"stop_at={stop_at} outside [2, {config.total_steps}]; "
            "localization needs two consecutive steps"
        )
    return stop_at


def validate_layers(config: BackboneConfig, available: Mapping[str, tuple[int, int]]) -> None:
    """Check that every bottleneck layer exists.

    Raises:
        UnknownLayerError: For the first id the backbone does not expose
    """
    for layer_id in config.bottleneck_layer_ids:
        if layer_id not in available:
            raise UnknownLayerError(
                f"unknown bottleneck layer {layer_id!r}; available: {sorted(available)}"
            )
