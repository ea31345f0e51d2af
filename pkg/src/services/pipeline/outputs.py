"""Per-instance output directory writer."""

import json
import logging
import re
from pathlib import Path

from src.models.evaluation import PromptSetEntry
from src.models.leakage import LeakageReport
from src.models.pipeline import AlignedSet, InstanceManifest, ManifestTarget
from src.models.search import AlignmentTrace
from src.utils.arrays import save_arrays
from src.utils.images import save_image, save_mask, save_overlay

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

_SLUG = re.compile(r"[^a-z0-9]+")


def slugify(text: str) -> str:
    return _SLUG.sub("-", text.lower()).strip("-") or "instance"


def prompt_set_instance_id(number: int, entry: PromptSetEntry) -> str:
    """Directory name of the prompt-set entry at zero-based ``number``."""
    return f"{number:03d}-{slugify(entry.style)}"


def write_report(directory: Path, stem: str, report: LeakageReport) -> Path:
    """Write a report document and its ``.npz`` arrays; returns the JSON path."""
    arrays = save_arrays(
        directory / f"{stem}.npz",
        c_ref=report.c_ref.values,
        c_tgt=report.c_tgt.values,
        leak_map=report.leak_map,
    )
    path = directory / f"{stem}.json"
    path.write_text(report.to_document(arrays.name).model_dump_json(indent=2), encoding="utf-8")
    return path


def write_traces(path: Path, traces: list[AlignmentTrace]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps([trace.model_dump(mode="json") for trace in traces], indent=2),
        encoding="utf-8",
    )
    return path


def write_aligned_set(aligned: AlignedSet, directory: Path, instance_id: str) -> InstanceManifest:
    """Write images, masks, reports and traces of one aligned set.

    Args:
        aligned: Result of ``align_set`` or ``align_from_real``
        directory: Instance directory, created if needed
        instance_id: Identifier stored in the manifest

    Returns:
        The manifest, also written as ``manifest.json``
    """
    directory.mkdir(parents=True, exist_ok=True)
    bundle = aligned.reference
    if bundle.image is None:
        raise ValueError("reference bundle has no image")
    save_image(directory / "reference.png", bundle.image)

    mask_files = []
    arrays = {}
    for index, (subject_map, mask) in enumerate(zip(bundle.subject_maps, bundle.masks, strict=True)):
        mask_files.append(save_mask(directory / f"reference_mask_{index}.png", mask.bits).name)
        arrays[f"subject_map_{index}"] = subject_map.values
        arrays[f"mask_{index}"] = mask.bits
    arrays_file = save_arrays(directory / "reference_masks.npz", **arrays).name

    manifest = InstanceManifest(
        instance_id=instance_id,
        style=bundle.prompt.style,
        reference_subjects=bundle.prompt.subject_texts,
        reference_image="reference.png",
        provenance=bundle.provenance,
        masks=mask_files,
        arrays_file=arrays_file,
        diagnostics=list(bundle.diagnostics),
    )
    for position, alignment in enumerate(aligned.targets):
        stem = f"target_{position:02d}"
        state = alignment.state
        if state.image is None:
            raise ValueError(f"{stem} has no final image")
        save_image(directory / f"{stem}.png", state.image)
        trace_path = write_traces(directory / f"{stem}_trace.json", alignment.traces)
        report_files = [
            write_report(directory, f"{stem}_report_{index}", report).name
            for index, report in enumerate(state.reports)
        ]
        overlay_files = [
            save_overlay(
                directory / f"{stem}_overlay_{index}.png", state.image, report.difference_map()
            ).name
            for index, report in enumerate(state.reports)
            if report.overall
        ]
        manifest.targets.append(
            ManifestTarget(
                subjects=state.prompt.subject_texts,
                image=f"{stem}.png",
                alphas=list(state.alphas),
                leakage=state.leak if state.reports else None,
                trace=trace_path.name,
                reports=report_files,
                overlays=overlay_files,
            )
        )

    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote %d targets to %s", len(manifest.targets), directory)
    return manifest


def read_manifest(directory: Path) -> InstanceManifest:
    return InstanceManifest.model_validate_json(
        (directory / MANIFEST_NAME).read_text(encoding="utf-8")
    )
