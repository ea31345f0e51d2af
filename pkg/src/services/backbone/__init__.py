"""Diffusion backbones."""

from src.services.backbone.base import Backbone, validate_layers, validate_stop_at
from src.services.backbone.factory import create_backbone, load_mock_spec
from src.services.backbone.mock import MockBackbone

__all__ = [
    "Backbone",
    "MockBackbone",
    "create_backbone",
    "load_mock_spec",
    "validate_layers",
    "validate_stop_at",
]
