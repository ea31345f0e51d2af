"""Style alignment pipeline."""

from src.services.pipeline.outputs import (
    MANIFEST_NAME,
    prompt_set_instance_id,
    read_manifest,
    slugify,
    write_aligned_set,
    write_report,
    write_traces,
)
from src.services.pipeline.service import StylePipeline

__all__ = [
    "MANIFEST_NAME",
    "StylePipeline",
    "prompt_set_instance_id",
    "read_manifest",
    "slugify",
    "write_aligned_set",
    "write_report",
    "write_traces",
]
