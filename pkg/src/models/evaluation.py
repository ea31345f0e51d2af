"""Evaluation models."""

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field

Question = Literal["Q1", "Q2", "Q3"]
Outcome = Literal["success", "failure", "indeterminate"]
MetricName = Literal["cl", "text", "consistency", "lvlm"]

METRIC_NAMES: tuple[str, ...] = ("cl", "text", "consistency", "lvlm")


class PromptSetEntry(BaseModel):
    """One line of the evaluation prompt set."""

    subjects: list[str] = Field(..., min_length=1)
    style: str = Field(..., min_length=1)

    def render(self) -> str:
        return "{" + ", ".join(self.subjects) + "} in " + self.style + "."


class EvaluationInstance(BaseModel):
    """A reference/target image pair to score."""

    entry_id: str
    reference_path: Path
    target_path: Path
    ref_subject: str
    tgt_subject: str


class MetricSummary(BaseModel):
    """Mean and spread of one cosine metric."""

    mean: Optional[float] = None
    std: Optional[float] = None
    count: int = 0
    failed: int = 0


class LVLMSummary(BaseModel):
    """Success rate of one LVLM question."""

    question: Question
    success_rate: Optional[float] = Field(None, ge=0.0, le=1.0)
    successes: int = 0
    failures: int = 0
    indeterminate: int = 0

    @property
    def answered(self) -> int:
        return self.successes + self.failures


class MetricReport(BaseModel):
    """Metrics of one method over a set of instances."""

    method: str
    instance_count: int = 0
    skipped: list[str] = Field(default_factory=list)
    metrics: dict[str, MetricSummary] = Field(default_factory=dict)
    lvlm: dict[str, LVLMSummary] = Field(default_factory=dict)
    metadata: dict[str, str] = Field(default_factory=dict)


class CalibrationReport(BaseModel):
    """CL bounds from unaligned generations."""

    no_leak_bound: MetricSummary
    full_leak_bound: MetricSummary
    entries: int
