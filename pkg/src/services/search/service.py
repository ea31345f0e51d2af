"""Bisection over the leak predicate and the searches built on it."""

import logging
import time
from collections.abc import Callable
from pathlib import Path
from typing import TYPE_CHECKING, Literal, Optional

from src.exceptions import ExternalGeneratorError
from src.models.pipeline import ReferenceBundle, TargetAlignment, TargetState
from src.models.prompts import PromptSpec
from src.models.search import AlignmentTrace, FinalPass, Probe, ProbeMode, SearchConfig
from src.services.localizer import LeakageLocalizer
from src.utils.images import load_image

if TYPE_CHECKING:
    from src.services.pipeline import StylePipeline

logger = logging.getLogger(__name__)

Direction = Literal["increasing", "decreasing"]
ImagePairGenerator = Callable[[float], tuple[Path, Path]]


def bisect_clean_boundary(
    leak: Callable[[float], bool],
    config: SearchConfig,
    clean_end: float = 0.0,
    leaky_end: float = 1.0,
    mode: ProbeMode = "half",
) -> tuple[float, AlignmentTrace]:
    """Find the value closest to ``leaky_end`` that is verified clean.

    Positions are bisected in ``u`` in [0, 1] mapped to
    ``clean_end + u * (leaky_end - clean_end)``, so ``precision`` is relative to
    the range. ``leaky_end`` is probed first and returned if clean. ``clean_end``
    is assumed clean; it is evaluated only after every midpoint has leaked, which
    costs one evaluation beyond :func:`evaluation_budget`. If it leaks too,
    ``clean_end`` is returned with termination ``leak-at-0``.

    Args:
        leak: Predicate returning True when the value leaks
        config: Precision and evaluation cap
        clean_end: End of the range expected to be clean
        leaky_end: End of the range expected to leak
        mode: Probe mode recorded in the trace

    Returns:
        The chosen value and the search trace
    """
    trace = AlignmentTrace(leak_increasing=leaky_end >= clean_end)
    precision = config.precision

    def value_at(position: float) -> float:
        return clean_end + position * (leaky_end - clean_end)

    def probe(position: float) -> bool:
        value = value_at(position)
        verdict = bool(leak(value))
        trace.probes.append(Probe(value=value, leak=verdict, mode=mode))
        logger.info("Probe %.6f -> %s", value, "leak" if verdict else "clean")
        return verdict

    leaks_at_end = probe(1.0)
    if not leaks_at_end or clean_end == leaky_end:
        trace.final_value = value_at(1.0)
        trace.termination = "leak-at-0" if leaks_at_end else "no-leak-at-1"
        return trace.final_value, trace

    lo, hi = 0.0, 1.0
    lo_verified = False
    while hi - lo > precision:
        if trace.evaluations >= config.eval_cap:
            trace.termination = "eval-cap"
            break
        mid = (lo + hi) / 2.0
        if probe(mid):
            hi = mid
        else:
            lo = mid
            lo_verified = True

    if not lo_verified and trace.termination != "eval-cap":
        # every midpoint leaked
        if probe(lo):
            trace.termination = "leak-at-0"
            logger.warning("Range end %.6f still leaks; returning it", value_at(lo))

    if not trace.monotone:
        trace.termination = "non-monotone-detected"
        logger.warning("Leak verdicts are not monotone: %s", trace.probes)
    trace.final_value = value_at(lo)
    return trace.final_value, trace


def binary_search_scale(
    leak: Callable[[float], bool], config: SearchConfig, mode: ProbeMode = "half"
) -> tuple[float, AlignmentTrace]:
    """Largest verified-clean alpha in [0, 1]."""
    return bisect_clean_boundary(leak, config, 0.0, 1.0, mode)


class AdaptiveSearch:
    """Scale searches driven through a :class:`StylePipeline`."""

    def __init__(self, pipeline: "StylePipeline", config: Optional[SearchConfig] = None) -> None:
        self.pipeline = pipeline
        self.config = config or pipeline.run_config.search

    def _search_subject(
        self,
        bundle: ReferenceBundle,
        target: PromptSpec,
        subject: int,
        alphas: list[float],
    ) -> tuple[AlignmentTrace, Optional[TargetState]]:
        """Search one subject's alpha with the other subjects held at ``alphas``."""
        clean_states: dict[float, TargetState] = {}
        calls_before = self.pipeline.backbone.generation_calls
        half = self.pipeline.backbone.config.localization_step

        def leak(alpha: float) -> bool:
            trial = list(alphas)
            trial[subject] = alpha
            state = self.pipeline.run_target(target, bundle, tuple(trial), stop_at=half)
            verdict = state.reports[subject].overall
            if not verdict:
                clean_states[alpha] = state
            return verdict

        alpha_star, trace = binary_search_scale(leak, self.config)
        trace.subject = bundle.prompt.subjects[subject].text
        trace.target = target.full_prompt
        trace.provenance = bundle.provenance
        trace.generation_passes = self.pipeline.backbone.generation_calls - calls_before
        logger.info(
            "Subject %r: alpha*=%.5f after %d probes (%s)",
            trace.subject, alpha_star, trace.evaluations, trace.termination,
        )
        return trace, clean_states.get(alpha_star)

    def adaptive_align(
        self, bundle: ReferenceBundle, target: PromptSpec, subject: int = 0
    ) -> TargetAlignment:
        """Search alpha on half generations, then generate the final target.

        The final pass continues the clean half generation at alpha* when one
        exists, so it re-uses that probe's verdict as the sanity check.
        """
        alphas = [1.0] * len(bundle.masks)
        trace, clean = self._search_subject(bundle, target, subject, alphas)
        alpha_star = trace.final_value if trace.final_value is not None else 0.0
        alphas[subject] = alpha_star
        calls_before = self.pipeline.backbone.generation_calls
        if clean is not None:
            final = self.pipeline.run_target(target, bundle, tuple(alphas), resume=clean)
            sanity = clean.leak
        else:
            final = self.pipeline.run_target(target, bundle, tuple(alphas))
            sanity = final.leak
        trace.generation_passes += self.pipeline.backbone.generation_calls - calls_before
        trace.final_pass = FinalPass(value=alpha_star, resumed=clean is not None, sanity_leak=sanity)
        if sanity:
            logger.warning("Final generation still leaks at alpha=%.5f", alpha_star)
        return TargetAlignment(state=final, traces=[trace])

    def multi_subject_align(self, bundle: ReferenceBundle, target: PromptSpec) -> TargetAlignment:
        """Independent searches per reference subject, then one combined generation.

        While one subject is searched the others stay at alpha 1. Overlapping
        masks take the smallest alpha.
        """
        count = len(bundle.masks)
        if count == 1:
            return self.adaptive_align(bundle, target)
        traces: list[AlignmentTrace] = []
        for subject in range(count):
            trace, _ = self._search_subject(bundle, target, subject, [1.0] * count)
            traces.append(trace)
        alphas = tuple(
            trace.final_value if trace.final_value is not None else 0.0 for trace in traces
        )
        calls_before = self.pipeline.backbone.generation_calls
        final = self.pipeline.run_target(target, bundle, alphas)
        passes = self.pipeline.backbone.generation_calls - calls_before
        for subject, trace in enumerate(traces):
            trace.generation_passes += passes
            trace.final_pass = FinalPass(
                value=alphas[subject], resumed=False, sanity_leak=final.reports[subject].overall
            )
        return TargetAlignment(state=final, traces=traces)


def tune_external_parameter(
    evaluate: ImagePairGenerator,
    ref_prompt: PromptSpec,
    tgt_prompt: PromptSpec,
    localizer: LeakageLocalizer,
    config: SearchConfig,
    direction: Direction = "increasing",
    param_range: tuple[float, float] = (0.0, 1.0),
    attempts: int = 3,
    retry_delay: float = 0.0,
) -> tuple[float, AlignmentTrace]:
    """Tune an external method's parameter with the post-hoc localizer.

    ``direction="increasing"`` means leakage grows with the parameter, so the
    low end of ``param_range`` is the clean end.

    Raises:
        ExternalGeneratorError: If a probe fails ``attempts`` times in a row
    """
    low, high = param_range
    if low > high:
        raise ValueError(f"invalid range {param_range}")
    clean_end, leaky_end = (low, high) if direction == "increasing" else (high, low)
    history: list[Probe] = []

    def leak(theta: float) -> bool:
        last_error = ""
        for attempt in range(1, attempts + 1):
            try:
                ref_path, tgt_path = evaluate(theta)
                report = localizer.localize_posthoc(
                    load_image(ref_path), load_image(tgt_path), ref_prompt, tgt_prompt
                )
                verdict = bool(report.overall)
                history.append(Probe(value=theta, leak=verdict, mode="posthoc"))
                return verdict
            except Exception as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("Generator failed at theta=%s (attempt %d/%d): %s", theta, attempt, attempts, last_error)
                history.append(Probe(value=theta, leak=True, mode="posthoc", error=last_error))
                if retry_delay:
                    time.sleep(retry_delay)
        partial = AlignmentTrace(
            probes=list(history), termination="eval-cap", leak_increasing=direction == "increasing"
        )
        raise ExternalGeneratorError(
            f"generator failed {attempts} times at theta={theta}: {last_error}", trace=partial
        )

    theta_star, trace = bisect_clean_boundary(leak, config, clean_end, leaky_end, mode="posthoc")
    trace.probes = history
    return theta_star, trace
