"""End-to-end style alignment pipeline."""

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Optional, Union

from src.exceptions import StepRangeError
from src.models.attention import ScaleParam
from src.models.backbone import AttentionControl, LatentTrajectory
from src.models.pipeline import (
    AlignedSet,
    ReferenceBundle,
    RunConfig,
    TargetAlignment,
    TargetState,
)
from src.models.prompts import PromptSpec
from src.models.search import AlignmentTrace, FinalPass
from src.services.backbone.base import Backbone
from src.services.localizer import LeakageLocalizer
from src.services.masks import aggregate_subject_map, extract_subject_mask
from src.services.search import AdaptiveSearch
from src.utils.images import load_image

logger = logging.getLogger(__name__)

Alphas = Union[float, Sequence[float]]


class StylePipeline:
    """Reference pass, controlled target passes and per-target scale search."""

    def __init__(
        self,
        backbone: Backbone,
        run_config: Optional[RunConfig] = None,
        localizer: Optional[LeakageLocalizer] = None,
    ) -> None:
        """Initialize the pipeline.

        Args:
            backbone: Diffusion backbone
            run_config: Thresholds, search settings and seeds
            localizer: Leakage localizer; built from ``run_config`` when omitted
        """
        self.backbone = backbone
        self.run_config = run_config or RunConfig()
        self.localizer = localizer or LeakageLocalizer(
            backbone, t_leak=self.run_config.t_leak, t_rel=self.run_config.t_rel
        )
        self.reference_runs = 0

    def prompt(self, subjects: Union[str, Sequence[str]], style: str) -> PromptSpec:
        """Build a prompt with this backbone's tokenizer."""
        names = [subjects] if isinstance(subjects, str) else list(subjects)
        return PromptSpec.build(names, style, self.backbone.tokenize)

    def run_reference(
        self, ref: PromptSpec, trajectory: Optional[LatentTrajectory] = None
    ) -> ReferenceBundle:
        """Generate (or replay) the reference and derive a subject mask per subject.

        Args:
            ref: Reference prompt
            trajectory: Inverted trajectory of a real reference image

        Returns:
            ReferenceBundle reused by every target probe
        """
        result = self.backbone.run_generation(
            ref,
            seed=self.run_config.reference_seed,
            capture_self_attention=True,
            trajectory=trajectory,
        )
        subject_maps = []
        masks = []
        for subject in ref.subjects:
            subject_map = aggregate_subject_map(result.records, subject.token_index)
            mask = extract_subject_mask(subject_map)
            if mask.diagnostic:
                logger.warning("Reference subject %r: %s; alpha stays 1", subject.text, mask.diagnostic)
            subject_maps.append(subject_map)
            masks.append(mask)
        self.reference_runs += 1
        logger.info(
            "Reference %r ready (%s), mask sizes %s",
            ref.full_prompt, result.provenance, [int(mask.bits.sum()) for mask in masks],
        )
        return ReferenceBundle(
            prompt=ref,
            result=result,
            subject_maps=tuple(subject_maps),
            masks=tuple(masks),
            provenance=result.provenance,
        )

    def control(self, bundle: ReferenceBundle, alphas: Sequence[float]) -> AttentionControl:
        return AttentionControl(
            reference=bundle.result.reference_trace(),
            masks=tuple(mask.bits for mask in bundle.masks),
            alphas=tuple(alphas),
            scope=self.run_config.scaling_scope,
        )

    def _normalize_alphas(self, bundle: ReferenceBundle, alphas: Alphas) -> tuple[float, ...]:
        if isinstance(alphas, (int, float)):
            values = (float(alphas),) * len(bundle.masks)
        else:
            values = tuple(float(alpha) for alpha in alphas)
        if len(values) != len(bundle.masks):
            raise ValueError(f"{len(values)} alphas for {len(bundle.masks)} reference subjects")
        for value in values:
            ScaleParam(alpha=value)
        return values

    def run_target(
        self,
        tgt: PromptSpec,
        bundle: Optional[ReferenceBundle],
        alphas: Alphas,
        stop_at: Optional[int] = None,
        resume: Optional[TargetState] = None,
    ) -> TargetState:
        """Generate a target sharing attention with the cached reference.

        When the run covers step ``ceil(T / 2)`` every reference subject is
        localized there; a half generation stopped at that step carries the
        verdicts and no image.

        Raises:
            ValueError: If the bundle is missing or alphas are invalid
            StepRangeError: If the reference trajectory does not cover the run
        """
        if bundle is None:
            raise ValueError("run_reference must produce a bundle before run_target")
        values = self._normalize_alphas(bundle, alphas)
        total = self.backbone.config.total_steps
        if bundle.result.completed_steps != total:
            raise StepRangeError(
                f"reference covers {bundle.result.completed_steps} steps, target needs {total}"
            )
        if resume is not None and resume.alphas != values:
            raise ValueError(f"cannot resume a run at {resume.alphas} with alphas {values}")

        result = self.backbone.run_generation(
            tgt,
            None if resume is not None else self.control(bundle, values),
            stop_at,
            seed=self.run_config.target_seed,
            resume=resume.partial if resume is not None else None,
        )
        half = self.backbone.config.localization_step
        reports: tuple = ()
        if half in result.features:
            reports = tuple(
                self.localizer.localize_in_generation(bundle.result, result, half, subject)
                for subject in range(len(bundle.masks))
            )
        elif resume is not None:
            reports = resume.reports
        return TargetState(prompt=tgt, alphas=values, result=result, reports=reports)

    def _fixed(self, bundle: ReferenceBundle, tgt: PromptSpec, alpha: float) -> TargetAlignment:
        calls_before = self.backbone.generation_calls
        state = self.run_target(tgt, bundle, alpha)
        traces = [
            AlignmentTrace(
                final_value=alpha,
                termination="fixed",
                subject=subject.text,
                target=tgt.full_prompt,
                provenance=bundle.provenance,
                generation_passes=self.backbone.generation_calls - calls_before,
                final_pass=FinalPass(value=alpha, sanity_leak=state.reports[index].overall),
            )
            for index, subject in enumerate(bundle.prompt.subjects)
        ]
        return TargetAlignment(state=state, traces=traces)

    def align_targets(self, bundle: ReferenceBundle, targets: Sequence[PromptSpec]) -> AlignedSet:
        """Align every target against one reference bundle, in input order."""
        if not targets:
            raise ValueError("at least one target is required")
        search = AdaptiveSearch(self)
        aligned = AlignedSet(reference=bundle)
        fixed = self.run_config.fixed_alpha
        for tgt in targets:
            if fixed is not None:
                aligned.targets.append(self._fixed(bundle, tgt, fixed))
            else:
                aligned.targets.append(search.multi_subject_align(bundle, tgt))
        return aligned

    def align_set(self, ref: PromptSpec, targets: Sequence[PromptSpec]) -> AlignedSet:
        """One reference pass, then an independent search per target."""
        if not targets:
            raise ValueError("at least one target is required")
        return self.align_targets(self.run_reference(ref), targets)

    def align_from_real(
        self, image_path: Path, ref: PromptSpec, targets: Sequence[PromptSpec]
    ) -> AlignedSet:
        """Use a real image as the reference through full-depth inversion.

        Raises:
            ImageDecodeError: If the image cannot be read
        """
        if not targets:
            raise ValueError("at least one target is required")
        image = load_image(image_path)
        trajectory = self.backbone.invert_trajectory(image, ref, seed=self.run_config.reference_seed)
        return self.align_targets(self.run_reference(ref, trajectory), targets)
