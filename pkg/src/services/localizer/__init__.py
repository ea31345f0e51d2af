"""Leakage localization service."""

from src.services.localizer.service import (
    DEFAULT_T_LEAK,
    DEFAULT_T_REL,
    LeakageLocalizer,
    detect_leakage,
    pool_subject_representation,
    refine_subject_attention,
    similarity_map,
)

__all__ = [
    "DEFAULT_T_LEAK",
    "DEFAULT_T_REL",
    "LeakageLocalizer",
    "detect_leakage",
    "pool_subject_representation",
    "refine_subject_attention",
    "similarity_map",
]
