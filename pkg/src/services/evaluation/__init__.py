"""Evaluation metrics, prompt set and clients."""

from src.services.evaluation.clients import (
    CannedVisionChatClient,
    HTTPEmbedder,
    HTTPVisionChatClient,
    MockBackboneEmbedder,
    MockBackboneVisionClient,
    TableEmbedder,
)
from src.services.evaluation.prompts import DEFAULT_PROMPT_SET, load_prompt_set, parse_prompt_line
from src.services.evaluation.service import (
    ANSWER_SUFFIX,
    EvaluationService,
    cl_metric,
    cosine,
    discover_instances,
    format_report_table,
    load_manifest_csv,
    lvlm_protocol,
    parse_yes_no,
    render_question,
    select_prompt_set,
    set_consistency,
    text_alignment,
    write_scatter,
)

__all__ = [
    "ANSWER_SUFFIX",
    "CannedVisionChatClient",
    "DEFAULT_PROMPT_SET",
    "EvaluationService",
    "HTTPEmbedder",
    "HTTPVisionChatClient",
    "MockBackboneEmbedder",
    "MockBackboneVisionClient",
    "TableEmbedder",
    "cl_metric",
    "cosine",
    "discover_instances",
    "format_report_table",
    "load_manifest_csv",
    "load_prompt_set",
    "lvlm_protocol",
    "parse_prompt_line",
    "parse_yes_no",
    "render_question",
    "select_prompt_set",
    "set_consistency",
    "text_alignment",
    "write_scatter",
]
