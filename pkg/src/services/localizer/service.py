"""Content leakage localization."""

import logging
import threading
from collections.abc import Sequence
from typing import Optional

import numpy as np

from src.exceptions import StepRangeError, UnrepresentableSubjectError
from src.models.backbone import AttentionRecord, FeatureStack, GenerationResult
from src.models.leakage import (
    LeakageReport,
    LocalizationMode,
    RefinedSubjectMap,
    SimilarityMap,
    SubjectRepresentation,
)
from src.models.masks import DescriptionMask, SubjectMap
from src.models.prompts import PromptSpec
from src.services.backbone.base import Backbone
from src.services.masks import NO_SUBJECT, aggregate_subject_map, extract_description_mask
from src.utils.arrays import FloatArray, resample_nearest

logger = logging.getLogger(__name__)

DEFAULT_T_LEAK = 0.1
DEFAULT_T_REL = 0.4


def refine_subject_attention(
    subject_map: SubjectMap, mask: DescriptionMask
) -> RefinedSubjectMap:
    """Normalize the subject map over the description mask.

    Raises:
        UnrepresentableSubjectError: If the mask is empty or carries no mass
    """
    if mask.empty:
        raise UnrepresentableSubjectError(mask.diagnostic or "description mask is empty")
    masked = np.where(mask.bits, subject_map.values, 0.0)
    total = float(masked.sum())
    if total <= 0.0:
        raise UnrepresentableSubjectError("description mask carries no attention mass")
    return RefinedSubjectMap(weights=masked / total)


def pool_subject_representation(
    features: FeatureStack, refined: RefinedSubjectMap
) -> SubjectRepresentation:
    """Weighted sum of each layer's features.

    Weights are resampled to a layer's grid when it differs from the bottleneck
    grid and renormalized there.
    """
    vectors: dict[str, FloatArray] = {}
    for layer_id, layer_features in features.layers.items():
        grid = (layer_features.shape[0], layer_features.shape[1])
        weights = refined.weights
        if weights.shape != grid:
            weights = resample_nearest(weights, grid)
            total = weights.sum()
            if total <= 0.0:
                raise UnrepresentableSubjectError(
                    f"{layer_id}: subject support vanished after resampling"
                )
            weights = weights / total
        vectors[layer_id] = np.einsum("hwd,hw->d", layer_features, weights)
    return SubjectRepresentation(vectors=vectors)


def similarity_map(
    target_features: FeatureStack, representation: SubjectRepresentation
) -> SimilarityMap:
    """Cosine similarity to the representation, averaged over layers.

    Zero-norm vectors give similarity 0. Layers on another grid are resampled
    to the grid of the first layer.
    """
    if set(target_features.layers) != set(representation.vectors):
        raise ValueError(
            f"layer sets differ: {sorted(target_features.layers)} vs {sorted(representation.vectors)}"
        )
    grid: Optional[tuple[int, int]] = None
    total: Optional[FloatArray] = None
    for layer_id, layer_features in target_features.layers.items():
        vector = representation.vectors[layer_id]
        norms = np.linalg.norm(layer_features, axis=-1) * np.linalg.norm(vector)
        dots = layer_features @ vector
        cosine = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
        if grid is None:
            grid = (cosine.shape[0], cosine.shape[1])
        elif cosine.shape != grid:
            cosine = resample_nearest(cosine, grid)
        total = cosine if total is None else total + cosine
    assert total is not None
    return SimilarityMap(np.clip(total / len(target_features.layers), -1.0, 1.0))


def detect_leakage(
    c_ref: SimilarityMap,
    c_tgt: SimilarityMap,
    t_leak: float = DEFAULT_T_LEAK,
    t_rel: float = DEFAULT_T_REL,
    mode: LocalizationMode = "in-generation",
    step: int = 0,
    diagnostics: Sequence[str] = (),
) -> LeakageReport:
    """Mark patches closer to the reference subject than to the target subject.

    A patch leaks when ``C_ref >= C_tgt + t_leak`` and either similarity
    reaches ``t_rel``.
    """
    if c_ref.grid != c_tgt.grid:
        raise ValueError(f"similarity grids differ: {c_ref.grid} vs {c_tgt.grid}")
    ref, tgt = c_ref.values, c_tgt.values
    leak_map = (ref >= tgt + t_leak) & ((tgt >= t_rel) | (ref >= t_rel))
    return LeakageReport(
        leak_map=leak_map,
        c_ref=c_ref,
        c_tgt=c_tgt,
        t_leak=t_leak,
        t_rel=t_rel,
        mode=mode,
        step=step,
        diagnostics=tuple(diagnostics),
    )


class LeakageLocalizer:
    """Localizes reference-subject leakage in target generations.

    Post-hoc localization runs the backbone under ``lock``; pass the same lock
    to every localizer that shares a backbone.
    """

    def __init__(
        self,
        backbone: Backbone,
        t_leak: float = DEFAULT_T_LEAK,
        t_rel: float = DEFAULT_T_REL,
        lock: Optional[threading.Lock] = None,
    ) -> None:
        self.backbone = backbone
        self.t_leak = t_leak
        self.t_rel = t_rel
        self.lock = lock if lock is not None else threading.Lock()

    def subject_representation(
        self,
        records: Sequence[AttentionRecord],
        features: FeatureStack,
        token_index: int,
    ) -> SubjectRepresentation:
        """Single-step subject map, description mask, refinement and pooling."""
        subject_map = aggregate_subject_map(records, token_index)
        mask = extract_description_mask(subject_map)
        refined = refine_subject_attention(subject_map, mask)
        return pool_subject_representation(features, refined)

    def localize(
        self,
        reference: GenerationResult,
        target: GenerationResult,
        step: int,
        mode: LocalizationMode,
        ref_subject: int = 0,
    ) -> LeakageReport:
        """Compare the target against the reference subject at ``step``.

        Cross-attention comes from ``step - 1`` and features from ``step``.
        With several target subjects, C_tgt is their per-patch maximum.

        Raises:
            StepRangeError: If ``step`` < 2
            MissingCaptureError: If a capture is absent
        """
        if step < 2:
            raise StepRangeError(f"localization needs steps {step - 1} and {step}")
        tgt_features = target.features_at(step)
        tgt_records = target.records_at(step - 1)
        ref_features = reference.features_at(step)
        ref_records = reference.records_at(step - 1)
        grid = tgt_records[0].grid
        source = reference.prompt.subjects[ref_subject]

        try:
            v_ref = self.subject_representation(ref_records, ref_features, source.token_index)
        except UnrepresentableSubjectError as exc:
            logger.warning("Reference subject %r not localized: %s", source.text, exc)
            return LeakageReport.no_leak(
                grid, self.t_leak, self.t_rel, mode, step,
                (f"{NO_SUBJECT}: reference subject {source.text!r}",),
            )
        c_ref = similarity_map(tgt_features, v_ref)

        diagnostics: list[str] = []
        target_maps: list[FloatArray] = []
        for subject in target.prompt.subjects:
            try:
                v_tgt = self.subject_representation(tgt_records, tgt_features, subject.token_index)
            except UnrepresentableSubjectError as exc:
                logger.warning("Target subject %r not localized: %s", subject.text, exc)
                diagnostics.append(f"{NO_SUBJECT}: target subject {subject.text!r}")
                continue
            target_maps.append(similarity_map(tgt_features, v_tgt).values)
        if not target_maps:
            return LeakageReport.no_leak(grid, self.t_leak, self.t_rel, mode, step, tuple(diagnostics))
        c_tgt = SimilarityMap(np.max(np.stack(target_maps), axis=0))
        report = detect_leakage(c_ref, c_tgt, self.t_leak, self.t_rel, mode, step, diagnostics)
        logger.debug(
            "%s leak=%s patches=%d at step %d", mode, report.overall, report.leak_patches, step
        )
        return report

    def localize_in_generation(
        self,
        reference: GenerationResult,
        target: GenerationResult,
        step: Optional[int] = None,
        ref_subject: int = 0,
    ) -> LeakageReport:
        """Localize inside a generation, by default at step ``ceil(T / 2)``."""
        step = self.backbone.config.localization_step if step is None else step
        return self.localize(reference, target, step, "in-generation", ref_subject)

    def localize_posthoc(
        self,
        ref_image: FloatArray,
        tgt_image: FloatArray,
        ref_prompt: PromptSpec,
        tgt_prompt: PromptSpec,
        ref_subject: int = 0,
    ) -> LeakageReport:
        """Localize in finished images by inverting them and re-running the last two steps."""
        with self.lock:
            reference = self.backbone.resimulate(
                self.backbone.ddim_invert(ref_image, ref_prompt), ref_prompt
            )
            target = self.backbone.resimulate(
                self.backbone.ddim_invert(tgt_image, tgt_prompt), tgt_prompt
            )
        return self.localize(
            reference, target, self.backbone.config.total_steps, "post-hoc", ref_subject
        )
