"""Subject maps and masks."""

from src.services.masks.service import (
    NO_SUBJECT,
    aggregate_subject_map,
    description_cap,
    extract_description_mask,
    extract_subject_mask,
    kmeans_1d,
    morphological_close,
)

__all__ = [
    "NO_SUBJECT",
    "aggregate_subject_map",
    "description_cap",
    "extract_description_mask",
    "extract_subject_mask",
    "kmeans_1d",
    "morphological_close",
]
