"""Structured prompt models."""

import re
from collections.abc import Callable, Sequence

from pydantic import BaseModel, Field

from src.exceptions import MultiTokenSubjectError

Tokenizer = Callable[[str], list[str]]

_ARTICLE = re.compile(r"^(a|an|the)\s+", re.IGNORECASE)


def subject_noun(text: str) -> str:
    """Strip a leading article from a subject description.

    ``"A house"`` becomes ``"house"``; ``"Clock"`` is returned unchanged.
    """
    return _ARTICLE.sub("", text.strip())


def render_prompt(subjects: Sequence[str], style: str) -> str:
    """Render the ``{subject} + {style}`` prompt text."""
    subject_text = " and ".join(subjects)
    return f"{subject_text} in {style}" if style else subject_text


class SubjectToken(BaseModel):
    """A subject description and the index of its token in the full prompt."""

    text: str = Field(..., min_length=1, description="Subject description")
    token_index: int = Field(..., ge=1, description="Token index in the prompt")

    @property
    def noun(self) -> str:
        return subject_noun(self.text)


class PromptSpec(BaseModel):
    """Prompt with the structure ``{subject} + {style}``."""

    subjects: list[SubjectToken] = Field(..., min_length=1)
    style: str = Field("", description="Style descriptor")
    full_prompt: str = Field(..., description="Rendered prompt text")

    @classmethod
    def build(
        cls, subjects: Sequence[str], style: str, tokenize: Tokenizer
    ) -> "PromptSpec":
        """Render a prompt and resolve the token index of every subject.

        Args:
            subjects: Subject descriptions, e.g. ``["A house"]``
            style: Style descriptor, e.g. ``"stickers style"``
            tokenize: Backbone tokenizer; index 0 is the start token

        Returns:
            PromptSpec with resolved token indices

        Raises:
            MultiTokenSubjectError: If a subject noun spans several tokens
            ValueError: If a subject token cannot be found in the prompt
        """
        if not subjects:
            raise ValueError("at least one subject is required")
        full_prompt = render_prompt(subjects, style)
        tokens = tokenize(full_prompt)
        cursor = 1
        resolved: list[SubjectToken] = []
        for text in subjects:
            noun_tokens = tokenize(subject_noun(text))[1:]
            if len(noun_tokens) != 1:
                raise MultiTokenSubjectError(
                    f"subject {text!r} maps to {len(noun_tokens)} tokens; "
                    "use a single-token subject"
                )
            try:
                index = tokens.index(noun_tokens[0], cursor)
            except ValueError as exc:
                raise ValueError(
                    f"subject {text!r} not found in prompt {full_prompt!r}"
                ) from exc
            resolved.append(SubjectToken(text=text, token_index=index))
            cursor = index + 1
        return cls(subjects=resolved, style=style, full_prompt=full_prompt)

    @property
    def subject_texts(self) -> list[str]:
        return [subject.text for subject in self.subjects]
