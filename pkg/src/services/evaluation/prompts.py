"""Evaluation prompt-set file."""

import re
from pathlib import Path
from typing import Optional

from src.exceptions import PromptSetParseError
from src.models.evaluation import PromptSetEntry

DEFAULT_PROMPT_SET = Path(__file__).resolve().parents[2] / "data" / "prompt_set.txt"

_LINE = re.compile(r"^\s*\{(?P<subjects>[^{}]*)\}\s+in\s+(?P<style>.+?)\s*\.\s*$")


def parse_prompt_line(line: str, line_number: int = 1) -> PromptSetEntry:
    """Parse ``{subject, ...} in style.``.

    Raises:
        PromptSetParseError: If the line does not follow the grammar
    """
    match = _LINE.match(line)
    if match is None:
        if "{" in line and "}" not in line:
            reason = "missing closing brace"
        elif not line.rstrip().endswith("."):
            reason = "missing final period"
        else:
            reason = "expected '{subject, ...} in style.'"
        raise PromptSetParseError(line_number, line, reason)
    subjects = [part.strip() for part in match.group("subjects").split(",")]
    if any(not subject for subject in subjects):
        raise PromptSetParseError(line_number, line, "empty subject")
    return PromptSetEntry(subjects=subjects, style=match.group("style").strip())


def load_prompt_set(path: Optional[Path] = None) -> list[PromptSetEntry]:
    """Read a prompt-set file; blank lines are skipped.

    Args:
        path: Prompt-set file; the bundled 100-line set when omitted

    Returns:
        One entry per non-blank line, in file order

    Raises:
        PromptSetParseError: With the 1-based number of the first bad line
    """
    source = Path(path) if path is not None else DEFAULT_PROMPT_SET
    entries = []
    for number, line in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            entries.append(parse_prompt_line(line, number))
    return entries
