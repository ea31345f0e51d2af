"""Scale search models."""

import math
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from src.models.backbone import Provenance

ProbeMode = Literal["half", "full", "posthoc"]
Termination = Literal[
    "converged",
    "no-leak-at-1",
    "leak-at-0",
    "non-monotone-detected",
    "eval-cap",
    "fixed",
]

DEFAULT_PRECISION = 0.03125


def evaluation_budget(precision: float) -> int:
    """Predicate evaluations a bisection at ``precision`` may need.

    A search whose every midpoint leaks spends one more evaluation on the
    clean end of the range, which is not counted here or against the cap.
    """
    return math.ceil(math.log2(1.0 / precision)) + 1


class SearchConfig(BaseModel):
    """Bisection settings."""

    precision: float = Field(DEFAULT_PRECISION, gt=0.0, le=1.0, description="Precision p")
    max_evals: Optional[int] = Field(None, ge=1, description="Evaluation cap")

    @model_validator(mode="after")
    def _fill_budget(self) -> "SearchConfig":
        budget = evaluation_budget(self.precision)
        if self.max_evals is None:
            self.max_evals = budget
        elif self.max_evals < budget:
            raise ValueError(
                f"max_evals must be at least {budget} for precision {self.precision}"
            )
        return self

    @property
    def eval_cap(self) -> int:
        return self.max_evals or evaluation_budget(self.precision)


class Probe(BaseModel):
    """One predicate evaluation."""

    value: float = Field(..., description="Probed alpha or external parameter")
    leak: bool
    mode: ProbeMode = "half"
    error: Optional[str] = None


class FinalPass(BaseModel):
    """The generation that produced the returned image."""

    value: float
    resumed: bool = Field(False, description="Continued from a clean half generation")
    sanity_leak: Optional[bool] = Field(
        None, description="Leak verdict re-checked at the localization step"
    )


class AlignmentTrace(BaseModel):
    """History of one scale search."""

    probes: list[Probe] = Field(default_factory=list)
    final_value: Optional[float] = None
    termination: Termination = "converged"
    subject: Optional[str] = None
    target: Optional[str] = None
    provenance: Provenance = "generated"
    generation_passes: int = 0
    final_pass: Optional[FinalPass] = None
    leak_increasing: bool = Field(True, description="Leakage grows with the probed value")

    @property
    def evaluations(self) -> int:
        return len(self.probes)

    @property
    def monotone(self) -> bool:
        """True when no clean verdict lies beyond a leaky one."""
        sign = 1.0 if self.leak_increasing else -1.0
        answered = [probe for probe in self.probes if probe.error is None]
        leaky = [sign * probe.value for probe in answered if probe.leak]
        clean = [sign * probe.value for probe in answered if not probe.leak]
        if not leaky or not clean:
            return True
        return max(clean) < min(leaky)
