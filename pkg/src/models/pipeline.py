"""Pipeline run configuration and results."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Literal, Optional

from pydantic import BaseModel, Field

from src.models.backbone import GenerationResult, PartialState, Provenance, ScalingScope
from src.models.leakage import LeakageReport
from src.models.masks import SubjectMap, SubjectMask
from src.models.prompts import PromptSpec
from src.models.search import AlignmentTrace, SearchConfig
from src.utils.arrays import FloatArray

if TYPE_CHECKING:
    from src.config import Settings


class RunConfig(BaseModel):
    """Settings for one pipeline run."""

    search: SearchConfig = Field(default_factory=SearchConfig)
    t_leak: float = Field(0.1, ge=0.0)
    t_rel: float = Field(0.4, ge=0.0)
    reference_seed: Optional[int] = None
    target_seed: Optional[int] = None
    output_dir: Path = Path("./outputs")
    reference_source: Literal["prompt", "image"] = "prompt"
    reference_image: Optional[Path] = None
    fixed_alpha: Optional[float] = Field(
        None, ge=0.0, le=1.0, description="Disables the search when set"
    )
    scaling_scope: ScalingScope = "all"

    @classmethod
    def from_settings(cls, settings: "Settings") -> "RunConfig":
        return cls(
            search=SearchConfig(
                precision=settings.precision, max_evals=settings.max_evals
            ),
            t_leak=settings.t_leak,
            t_rel=settings.t_rel,
            reference_seed=settings.seed,
            target_seed=settings.target_seed,
            output_dir=Path(settings.output_path),
            fixed_alpha=settings.fixed_alpha,
            scaling_scope=settings.scaling_scope,
        )


@dataclass(frozen=True)
class ReferenceBundle:
    """Reference generation cached for every target probe."""

    prompt: PromptSpec
    result: GenerationResult
    subject_maps: tuple[SubjectMap, ...]
    masks: tuple[SubjectMask, ...]
    provenance: Provenance = "generated"

    @property
    def image(self) -> Optional[FloatArray]:
        return self.result.image

    @property
    def diagnostics(self) -> tuple[str, ...]:
        return tuple(mask.diagnostic for mask in self.masks if mask.diagnostic)


@dataclass
class TargetState:
    """Outcome of one controlled target generation."""

    prompt: PromptSpec
    alphas: tuple[float, ...]
    result: GenerationResult
    reports: tuple[LeakageReport, ...] = ()

    @property
    def image(self) -> Optional[FloatArray]:
        return self.result.image

    @property
    def partial(self) -> Optional[PartialState]:
        return self.result.partial

    @property
    def leak(self) -> bool:
        return any(report.overall for report in self.reports)

    @property
    def report(self) -> Optional[LeakageReport]:
        return self.reports[0] if self.reports else None


@dataclass
class TargetAlignment:
    """Final target image with its search traces."""

    state: TargetState
    traces: list[AlignmentTrace]

    @property
    def alphas(self) -> tuple[float, ...]:
        return self.state.alphas


@dataclass
class AlignedSet:
    """Reference plus aligned targets in input order."""

    reference: ReferenceBundle
    targets: list[TargetAlignment] = field(default_factory=list)


class ManifestTarget(BaseModel):
    """One target image listed in an instance manifest."""

    subjects: list[str]
    image: str = Field(..., description="Path relative to the instance directory")
    alphas: list[float]
    leakage: Optional[bool] = Field(None, description="Verdict of the final pass")
    trace: Optional[str] = None
    reports: list[str] = Field(default_factory=list)
    overlays: list[str] = Field(default_factory=list, description="One per leaking subject report")


class InstanceManifest(BaseModel):
    """Index of everything written for one reference and its targets."""

    instance_id: str
    style: str
    reference_subjects: list[str]
    reference_image: str
    provenance: Provenance = "generated"
    masks: list[str] = Field(default_factory=list)
    arrays_file: Optional[str] = None
    diagnostics: list[str] = Field(default_factory=list)
    targets: list[ManifestTarget] = Field(default_factory=list)
