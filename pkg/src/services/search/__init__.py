"""Adaptive scale search."""

from src.services.search.service import (
    AdaptiveSearch,
    binary_search_scale,
    bisect_clean_boundary,
    tune_external_parameter,
)

__all__ = [
    "AdaptiveSearch",
    "binary_search_scale",
    "bisect_clean_boundary",
    "tune_external_parameter",
]
