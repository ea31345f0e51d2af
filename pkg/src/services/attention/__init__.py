"""Shared self-attention math."""

from src.services.attention.service import (
    ADAIN_EPS,
    adain,
    moment_rows,
    reference_attention_mass,
    scale_reference_keys,
    shared_attention_forward,
)

__all__ = [
    "ADAIN_EPS",
    "adain",
    "moment_rows",
    "reference_attention_mass",
    "scale_reference_keys",
    "shared_attention_forward",
]
