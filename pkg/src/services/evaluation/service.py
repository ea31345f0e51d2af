"""Quantitative evaluation of aligned image sets."""

import asyncio
import csv
import logging
import re
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Optional

import numpy as np

from src.exceptions import EvaluationError, ServiceRequestError
from src.models.evaluation import (
    METRIC_NAMES,
    CalibrationReport,
    EvaluationInstance,
    LVLMSummary,
    MetricReport,
    MetricSummary,
    Outcome,
    PromptSetEntry,
    Question,
)
from src.models.prompts import PromptSpec, subject_noun
from src.services.backbone.base import Backbone
from src.services.evaluation.clients import ImageEmbedder, ImageTextEmbedder, VisionChatClient
from src.services.pipeline.outputs import MANIFEST_NAME, prompt_set_instance_id, read_manifest, slugify
from src.utils.arrays import FloatArray
from src.utils.images import save_image

logger = logging.getLogger(__name__)

ANSWER_SUFFIX = "Choose one: Yes or No"
QUESTION_TEMPLATES: dict[str, str] = {
    "Q1": "Are there any {ref} visual features in this {tgt} image?",
    "Q2": "Is there any {ref} in this image?",
    "Q3": "Is there any {tgt} in this image?",
}
# Q1 and Q2 succeed on "No" (no leakage), Q3 on "Yes" (target present)
EXPECTED_ANSWER: dict[str, bool] = {"Q1": False, "Q2": False, "Q3": True}
CONSISTENCY_CAVEAT = "set consistency is favored by semantic content leakage"
MANIFEST_COLUMNS = ("entry_id", "reference_path", "target_path", "ref_subject", "tgt_subject")

_ANSWER = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def cosine(a: FloatArray, b: FloatArray) -> float:
    """Cosine similarity clipped to [-1, 1]; zero vectors score 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise EvaluationError(f"embedding sizes differ: {a.shape} vs {b.shape}")
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return float(np.clip(a @ b / norm, -1.0, 1.0))


def summarize(scores: Sequence[float], failed: int = 0) -> MetricSummary:
    if not scores:
        return MetricSummary(count=0, failed=failed)
    values = np.asarray(scores, dtype=np.float64)
    return MetricSummary(mean=float(values.mean()), std=float(values.std()), count=len(scores), failed=failed)


def render_question(question: Question, ref_subject: str, tgt_subject: str) -> str:
    """Question text with the answer-format suffix; subjects lose their article."""
    body = QUESTION_TEMPLATES[question].format(
        ref=subject_noun(ref_subject), tgt=subject_noun(tgt_subject)
    )
    return f"{body} {ANSWER_SUFFIX}"


def parse_yes_no(reply: str) -> Optional[bool]:
    """First standalone yes/no token of a reply; ``None`` when there is none."""
    match = _ANSWER.search(reply)
    if match is None:
        return None
    return match.group(1).lower() == "yes"


async def _image_text_scores(
    images: Sequence[Path], text: str, embedder: ImageTextEmbedder
) -> MetricSummary:
    if not images:
        raise EvaluationError("at least one image is required")
    text_vector = await embedder.embed_text(text)
    scores: list[float] = []
    failed = 0
    for image in images:
        try:
            scores.append(cosine(await embedder.embed_image(image), text_vector))
        except (ServiceRequestError, OSError, ValueError) as exc:
            failed += 1
            logger.warning("Skipping %s: %s", image, exc)
    return summarize(scores, failed)


async def cl_metric(
    images: Sequence[Path], ref_subject: str, embedder: ImageTextEmbedder
) -> MetricSummary:
    """Content leakage: mean image-text cosine between targets and the reference subject."""
    return await _image_text_scores(images, ref_subject, embedder)


async def text_alignment(
    images: Sequence[Path], tgt_subject: str, embedder: ImageTextEmbedder
) -> MetricSummary:
    """Mean image-text cosine between targets and their own subject."""
    return await _image_text_scores(images, tgt_subject, embedder)


async def set_consistency(
    targets: Sequence[Path], reference: Path, embedder: ImageEmbedder
) -> MetricSummary:
    """Mean image-image cosine between each target and the reference."""
    if not targets:
        raise EvaluationError("at least one target is required")
    reference_vector = await embedder.embed_image(reference)
    scores: list[float] = []
    failed = 0
    for target in targets:
        try:
            scores.append(cosine(await embedder.embed_image(target), reference_vector))
        except (ServiceRequestError, OSError, ValueError) as exc:
            failed += 1
            logger.warning("Skipping %s: %s", target, exc)
    return summarize(scores, failed)


async def lvlm_protocol(
    image: Path,
    ref_subject: str,
    tgt_subject: str,
    question: Question,
    client: VisionChatClient,
) -> Outcome:
    """Ask one protocol question and grade the reply."""
    try:
        reply = await client.ask(image, render_question(question, ref_subject, tgt_subject))
    except ServiceRequestError as exc:
        logger.warning("No answer for %s %s: %s", image.name, question, exc)
        return "indeterminate"
    answer = parse_yes_no(reply)
    if answer is None:
        logger.warning("Indeterminate reply for %s %s: %r", image.name, question, reply)
        return "indeterminate"
    return "success" if answer == EXPECTED_ANSWER[question] else "failure"


def discover_instances(outputs_dir: Path) -> list[EvaluationInstance]:
    """Instances listed by every ``manifest.json`` below ``outputs_dir``."""
    instances = []
    for manifest_path in sorted(Path(outputs_dir).rglob(MANIFEST_NAME)):
        directory = manifest_path.parent
        manifest = read_manifest(directory)
        for position, target in enumerate(manifest.targets):
            instances.append(
                EvaluationInstance(
                    entry_id=f"{manifest.instance_id}/{position:02d}",
                    reference_path=directory / manifest.reference_image,
                    target_path=directory / target.image,
                    ref_subject=manifest.reference_subjects[0],
                    tgt_subject=target.subjects[0],
                )
            )
    return instances


def load_manifest_csv(path: Path) -> list[EvaluationInstance]:
    """Instances of an external method; relative paths resolve against the CSV.

    Raises:
        EvaluationError: If a required column is missing
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        missing = [column for column in MANIFEST_COLUMNS if column not in (reader.fieldnames or [])]
        if missing:
            raise EvaluationError(f"{path}: missing columns {missing}")
        rows = list(reader)
    return [
        EvaluationInstance(
            entry_id=row["entry_id"],
            reference_path=path.parent / row["reference_path"],
            target_path=path.parent / row["target_path"],
            ref_subject=row["ref_subject"],
            tgt_subject=row["tgt_subject"],
        )
        for row in rows
    ]


def select_prompt_set(
    instances: Sequence[EvaluationInstance], entries: Sequence[PromptSetEntry]
) -> list[EvaluationInstance]:
    """Keep the instances generated for ``entries``, in prompt-set order.

    Instance ids written by a prompt-set run start with the entry's directory
    name; entries without any instance are logged and skipped.
    """
    by_directory: dict[str, list[EvaluationInstance]] = {}
    for instance in instances:
        by_directory.setdefault(instance.entry_id.split("/", 1)[0], []).append(instance)
    selected: list[EvaluationInstance] = []
    for number, entry in enumerate(entries):
        found = by_directory.get(prompt_set_instance_id(number, entry), [])
        if not found:
            logger.warning("No generated instances for prompt-set entry %d: %s", number + 1, entry.render())
        selected.extend(found)
    return selected


class EvaluationService:
    """Scores a method's instances with bounded concurrent requests."""

    def __init__(
        self,
        embedder: Optional[ImageTextEmbedder] = None,
        image_embedder: Optional[ImageEmbedder] = None,
        lvlm: Optional[VisionChatClient] = None,
        concurrency: int = 4,
    ) -> None:
        """Initialize the service.

        Args:
            embedder: Image-text embedder for CL and text alignment
            image_embedder: Image embedder for set consistency
            lvlm: Vision-chat client for the question protocol
            concurrency: Maximum instances scored at once
        """
        self.embedder = embedder
        self.image_embedder = image_embedder
        self.lvlm = lvlm
        self.concurrency = concurrency

    def _check(self, metrics: Sequence[str]) -> list[str]:
        if not metrics:
            raise EvaluationError("select at least one metric")
        unknown = [name for name in metrics if name not in METRIC_NAMES]
        if unknown:
            raise EvaluationError(f"unknown metrics {unknown}; choose from {list(METRIC_NAMES)}")
        needs = {"cl": self.embedder, "text": self.embedder, "consistency": self.image_embedder, "lvlm": self.lvlm}
        for name in metrics:
            if needs[name] is None:
                raise EvaluationError(f"metric {name!r} needs a client that was not configured")
        return list(dict.fromkeys(metrics))

    async def _score(
        self, instance: EvaluationInstance, metrics: list[str]
    ) -> dict[str, object]:
        scores: dict[str, object] = {}
        target = [instance.target_path]
        if "cl" in metrics:
            assert self.embedder is not None
            scores["cl"] = await cl_metric(target, instance.ref_subject, self.embedder)
        if "text" in metrics:
            assert self.embedder is not None
            scores["text"] = await text_alignment(target, instance.tgt_subject, self.embedder)
        if "consistency" in metrics:
            assert self.image_embedder is not None
            scores["consistency"] = await set_consistency(target, instance.reference_path, self.image_embedder)
        if "lvlm" in metrics:
            assert self.lvlm is not None
            for question in ("Q1", "Q2", "Q3"):
                scores[question] = await lvlm_protocol(
                    instance.target_path, instance.ref_subject, instance.tgt_subject, question, self.lvlm  # type: ignore[arg-type]
                )
        return scores

    async def evaluate_method(
        self,
        method: str,
        instances: Iterable[EvaluationInstance],
        metrics: Sequence[str] = METRIC_NAMES,
    ) -> MetricReport:
        """Aggregate the selected metrics over all readable instances.

        Instances with a missing reference or target image are skipped and
        listed in the report.

        Raises:
            EvaluationError: If no metric (or an unknown one) is selected
        """
        selected = self._check(metrics)
        ordered = sorted(instances, key=lambda instance: instance.entry_id)
        report = MetricReport(method=method)
        ready = []
        for instance in ordered:
            if not instance.reference_path.is_file() or not instance.target_path.is_file():
                logger.warning("Skipping %s: missing image", instance.entry_id)
                report.skipped.append(instance.entry_id)
            else:
                ready.append(instance)

        semaphore = asyncio.Semaphore(self.concurrency)

        async def bounded(instance: EvaluationInstance) -> dict[str, object]:
            async with semaphore:
                return await self._score(instance, selected)

        results = await asyncio.gather(*(bounded(instance) for instance in ready))
        report.instance_count = len(ready)

        for name in ("cl", "text", "consistency"):
            if name not in selected:
                continue
            values: list[float] = []
            failed = 0
            for result in results:
                summary = result[name]
                assert isinstance(summary, MetricSummary)
                if summary.mean is None:
                    failed += 1
                else:
                    values.append(summary.mean)
            report.metrics[name] = summarize(values, failed)
        if "lvlm" in selected:
            for question in ("Q1", "Q2", "Q3"):
                outcomes = [result[question] for result in results]
                successes = outcomes.count("success")
                failures = outcomes.count("failure")
                answered = successes + failures
                report.lvlm[question] = LVLMSummary(
                    question=question,  # type: ignore[arg-type]
                    success_rate=successes / answered if answered else None,
                    successes=successes,
                    failures=failures,
                    indeterminate=outcomes.count("indeterminate"),
                )
        if "consistency" in selected:
            report.metadata["consistency_caveat"] = CONSISTENCY_CAVEAT
        logger.info("Evaluated %s over %d instances (%d skipped)", method, report.instance_count, len(report.skipped))
        return report

    async def calibrate(
        self,
        backbone: Backbone,
        entries: Sequence[PromptSetEntry],
        work_dir: Path,
        seed: Optional[int] = None,
    ) -> CalibrationReport:
        """CL bounds from unaligned generations.

        The first subject of each entry is the reference. The no-leakage bound
        scores plain generations of the other subjects against it; the
        full-leakage bound scores plain generations of the reference subject
        itself.

        Raises:
            EvaluationError: If no entry is given or no embedder is configured
        """
        if not entries:
            raise EvaluationError("calibration needs at least one prompt-set entry")
        if self.embedder is None:
            raise EvaluationError("calibration needs an image-text embedder")
        no_leak: list[float] = []
        full_leak: list[float] = []
        for entry in entries:
            directory = Path(work_dir) / slugify(entry.style)
            reference = entry.subjects[0]
            for position, subject in enumerate(entry.subjects[1:]):
                target_seed = (seed or 0) + position
                plain = self._generate(backbone, subject, entry.style, target_seed, directory / f"plain_{position:02d}.png")
                leaked = self._generate(backbone, reference, entry.style, target_seed, directory / f"full_{position:02d}.png")
                no_leak_summary = await cl_metric([plain], reference, self.embedder)
                full_leak_summary = await cl_metric([leaked], reference, self.embedder)
                if no_leak_summary.mean is not None:
                    no_leak.append(no_leak_summary.mean)
                if full_leak_summary.mean is not None:
                    full_leak.append(full_leak_summary.mean)
        return CalibrationReport(
            no_leak_bound=summarize(no_leak), full_leak_bound=summarize(full_leak), entries=len(entries)
        )

    @staticmethod
    def _generate(backbone: Backbone, subject: str, style: str, seed: int, path: Path) -> Path:
        prompt = PromptSpec.build([subject], style, backbone.tokenize)
        result = backbone.run_generation(prompt, seed=seed)
        assert result.image is not None
        return save_image(path, result.image)


def format_report_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text table with one row per method."""
    header = ["Method", "N", "CL", "Text", "Consistency", "Q1", "Q2", "Q3"]

    def metric(report: MetricReport, name: str) -> str:
        summary = report.metrics.get(name)
        if summary is None or summary.mean is None:
            return "-"
        return f"{summary.mean:.4f}±{summary.std or 0.0:.4f}"

    def rate(report: MetricReport, question: str) -> str:
        summary = report.lvlm.get(question)
        if summary is None or summary.success_rate is None:
            return "-"
        return f"{summary.success_rate:.2%} ({summary.answered})"

    rows = [header] + [
        [
            report.method,
            str(report.instance_count),
            metric(report, "cl"),
            metric(report, "text"),
            metric(report, "consistency"),
            rate(report, "Q1"),
            rate(report, "Q2"),
            rate(report, "Q3"),
        ]
        for report in reports
    ]
    widths = [max(len(row[column]) for row in rows) for column in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths, strict=True)) for row in rows]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)


def write_scatter(
    reports: Sequence[MetricReport], csv_path: Path, png_path: Optional[Path] = None
) -> Path:
    """Text alignment against set consistency per method, as CSV and optional PNG."""
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    points = []
    for report in reports:
        text = report.metrics.get("text")
        consistency = report.metrics.get("consistency")
        if text is None or consistency is None or text.mean is None or consistency.mean is None:
            continue
        points.append((report.method, text.mean, consistency.mean))
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "text_alignment", "set_consistency"])
        writer.writerows(points)
    if png_path is not None and points:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        for method, text_score, consistency_score in points:
            ax.scatter(text_score, consistency_score, s=40)
            ax.annotate(method, (text_score, consistency_score), textcoords="offset points", xytext=(4, 4), fontsize=8)
        ax.set_xlabel("Text alignment")
        ax.set_ylabel("Set consistency")
        fig.tight_layout()
        fig.savefig(png_path, dpi=150)
        plt.close(fig)
    return csv_path
