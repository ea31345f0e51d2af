"""Backbone selection from settings."""

import logging
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from src.config import Settings
from src.exceptions import BackboneError
from src.models.backbone import BackboneConfig
from src.models.mock import MockSpec
from src.services.backbone.base import Backbone
from src.services.backbone.mock import MockBackbone

logger = logging.getLogger(__name__)


def load_mock_spec(path: Optional[Path]) -> MockSpec:
    """Read a mock definition from JSON; ``None`` gives the default mock.

    Raises:
        BackboneError: If the file is missing or invalid
    """
    if path is None:
        return MockSpec()
    try:
        return MockSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise BackboneError(f"cannot read mock spec {path}: {exc}") from exc
    except ValidationError as exc:
        raise BackboneError(f"invalid mock spec {path}: {exc}") from exc


def create_backbone(settings: Settings) -> Backbone:
    """Build the configured backbone.

    The mock keeps the step count and layers of its spec; the diffusers
    backbone takes ``total_steps`` and ``bottleneck_layers`` from settings.
    """
    if settings.backbone == "mock":
        spec = load_mock_spec(Path(settings.mock_spec_path) if settings.mock_spec_path else None)
        logger.info("Using mock backbone (T=%d)", spec.backbone.total_steps)
        return MockBackbone(spec)

    from src.services.backbone.diffusers_backend import DiffusersBackbone, layer_grid

    config = None
    layers = settings.bottleneck_layer_ids
    if layers:
        config = BackboneConfig(
            total_steps=settings.total_steps,
            bottleneck_layer_ids=layers,
            latent_grid=layer_grid(layers[0], settings.image_size // 8),
            seed=settings.seed or 0,
        )
    backbone = DiffusersBackbone(
        config=config,
        model_id=settings.model_id,
        device=settings.device,
        dtype=settings.dtype,
        guidance_scale=settings.guidance_scale,
        image_size=settings.image_size,
    )
    if config is None:
        backbone.config = backbone.config.model_copy(
            update={"total_steps": settings.total_steps, "seed": settings.seed or 0}
        )
        backbone.pipe.scheduler.set_timesteps(settings.total_steps)
    return backbone
