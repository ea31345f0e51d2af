"""Command-line entry point.

Options resolve as flag > ``--config`` file > environment / ``.env`` > default.
Every command echoes the resolved settings into its output directory as
``config.env``, which ``--config`` accepts again.
"""

import argparse
import asyncio
import json
import logging
import shlex
import subprocess
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Optional

from dotenv import dotenv_values

from src.config import Settings
from src.exceptions import ExternalGeneratorError, LeakGuardError, MultiTokenSubjectError
from src.models.evaluation import METRIC_NAMES, EvaluationInstance, MetricReport, PromptSetEntry
from src.models.pipeline import RunConfig
from src.models.prompts import PromptSpec
from src.services.backbone import Backbone, MockBackbone, create_backbone
from src.services.evaluation import (
    EvaluationService,
    HTTPEmbedder,
    HTTPVisionChatClient,
    MockBackboneEmbedder,
    MockBackboneVisionClient,
    discover_instances,
    format_report_table,
    load_manifest_csv,
    load_prompt_set,
    select_prompt_set,
    write_scatter,
)
from src.services.localizer import LeakageLocalizer
from src.services.pipeline import (
    StylePipeline,
    prompt_set_instance_id,
    slugify,
    write_aligned_set,
    write_report,
    write_traces,
)
from src.services.search import tune_external_parameter
from src.utils.images import load_image, save_overlay
from src.utils.log import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_LEAK = 2
CONFIG_ECHO = "config.env"

# argparse dests that map onto Settings fields
SETTING_FLAGS = (
    "precision",
    "max_evals",
    "t_leak",
    "t_rel",
    "seed",
    "target_seed",
    "fixed_alpha",
    "scaling_scope",
    "backbone",
    "mock_spec_path",
    "output_path",
    "log_level",
)


def resolve_settings(args: argparse.Namespace) -> Settings:
    """Merge flags over the config file over environment and defaults."""
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        for key, value in dotenv_values(args.config).items():
            if value not in (None, ""):
                values[key.lower()] = value
    for name in SETTING_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    return Settings(**values)


def write_config_echo(settings: Settings, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CONFIG_ECHO
    path.write_text("\n".join(settings.to_env_lines()) + "\n", encoding="utf-8")
    return path


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Flat key=value settings file")
    parser.add_argument("--out", dest="output_path", help="Output directory")
    parser.add_argument("--backbone", choices=["mock", "diffusers"])
    parser.add_argument("--mock-spec", dest="mock_spec_path", help="Mock backbone JSON definition")
    parser.add_argument("--seed", type=int, help="Reference seed")
    parser.add_argument("--target-seed", type=int)
    parser.add_argument("--t-leak", type=float, help="Leak threshold (default 0.1)")
    parser.add_argument("--t-rel", type=float, help="Relevance threshold (default 0.4)")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _metric_list(text: str) -> list[str]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    unknown = [name for name in names if name not in METRIC_NAMES]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"unknown metrics {unknown}; choose from {', '.join(METRIC_NAMES)}"
        )
    return names


def _param_range(text: str) -> tuple[float, float]:
    try:
        low, high = (float(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected 'a,b'") from exc
    return low, high


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leakguard", description="Content leakage control for style-consistent generation"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Generate a style-aligned image set")
    _add_common(generate)
    generate.add_argument("--ref-subject", action="append", default=[], help="Reference subject (repeatable)")
    generate.add_argument("--tgt-subject", action="append", default=[], help="Target subject (repeatable)")
    generate.add_argument("--style", help="Style descriptor")
    generate.add_argument("--ref-image", type=Path, help="Real reference image, inverted before replay")
    generate.add_argument("--prompt-set", type=Path, help="Generate every entry of a prompt-set file")
    generate.add_argument("--limit", type=int, help="Only the first N prompt-set entries")
    generate.add_argument("--precision", type=float, help="Search precision (default 0.03125)")
    generate.add_argument("--max-evals", type=int)
    generate.add_argument("--fixed-alpha", type=float, help="Use this scale and skip the search")
    generate.add_argument("--scaling-scope", choices=["all", "bottleneck"])

    localize = commands.add_parser("localize", help="Localize leakage between two finished images")
    _add_common(localize)
    localize.add_argument("--ref", type=Path, required=True, help="Reference image")
    localize.add_argument("--tgt", type=Path, required=True, help="Target image")
    localize.add_argument("--ref-subject", required=True)
    localize.add_argument("--tgt-subject", required=True)
    localize.add_argument("--style", default="")
    localize.add_argument("--exit-on-leak", action="store_true", help="Exit 2 when leakage is found")

    tune = commands.add_parser("tune", help="Tune an external method's parameter")
    _add_common(tune)
    tune.add_argument("--generator", required=True, help="Command template with a {theta} placeholder")
    tune.add_argument("--ref-subject", required=True)
    tune.add_argument("--tgt-subject", required=True)
    tune.add_argument("--style", default="")
    tune.add_argument("--param-range", type=_param_range, default=(0.0, 1.0))
    tune.add_argument("--direction", choices=["increasing", "decreasing"], default="increasing")
    tune.add_argument("--attempts", type=int, default=3)
    tune.add_argument("--timeout", type=float, default=600.0)
    tune.add_argument("--precision", type=float)
    tune.add_argument("--max-evals", type=int)

    evaluate = commands.add_parser("evaluate", help="Score generated sets")
    _add_common(evaluate)
    evaluate.add_argument(
        "--source",
        action="append",
        required=True,
        help="METHOD=PATH, PATH is an output directory or a manifest CSV (repeatable)",
    )
    evaluate.add_argument("--metrics", type=_metric_list, default=list(METRIC_NAMES))
    evaluate.add_argument("--mock", action="store_true", help="Use mock embedders and vision client")
    evaluate.add_argument("--scatter", action="store_true", help="Also write the scatter plot PNG")
    evaluate.add_argument(
        "--prompt-set",
        type=Path,
        help="Only score output-directory instances generated for this prompt set",
    )
    evaluate.add_argument("--limit", type=int, help="Only the first N prompt-set entries")

    calibrate = commands.add_parser("calibrate", help="Compute the CL metric bounds")
    _add_common(calibrate)
    calibrate.add_argument("--prompt-set", type=Path, help="Defaults to the bundled set")
    calibrate.add_argument("--limit", type=int)
    calibrate.add_argument("--mock", action="store_true")
    return parser


def _pipeline(settings: Settings, backbone: Optional[Backbone] = None) -> StylePipeline:
    return StylePipeline(backbone or create_backbone(settings), RunConfig.from_settings(settings))


def _align(
    pipeline: StylePipeline,
    ref_subjects: Sequence[str],
    tgt_subjects: Sequence[str],
    style: str,
    out_dir: Path,
    instance_id: str,
    ref_image: Optional[Path] = None,
) -> Path:
    ref = pipeline.prompt(ref_subjects, style)
    targets = [pipeline.prompt(subject, style) for subject in tgt_subjects]
    aligned = (
        pipeline.align_from_real(ref_image, ref, targets)
        if ref_image is not None
        else pipeline.align_set(ref, targets)
    )
    manifest = write_aligned_set(aligned, out_dir, instance_id)
    for target, alignment in zip(manifest.targets, aligned.targets, strict=True):
        alphas = ", ".join(f"{trace.final_value:.5f} ({trace.termination})" for trace in alignment.traces)
        print(f"{out_dir / target.image}: alpha* {alphas}")
    return out_dir


def cmd_generate(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = Path(settings.output_path)
    pipeline = _pipeline(settings)
    if args.prompt_set is not None:
        entries = load_prompt_set(args.prompt_set)[: args.limit]
        for number, entry in enumerate(entries):
            instance_id = prompt_set_instance_id(number, entry)
            try:
                _align(pipeline, entry.subjects[:1], entry.subjects[1:], entry.style, out_dir / instance_id, instance_id)
            except MultiTokenSubjectError as exc:
                logger.warning("Skipping entry %d: %s", number + 1, exc)
    else:
        style = args.style or ""
        instance_id = slugify(f"{args.ref_subject[0]} {style}")
        _align(pipeline, args.ref_subject, args.tgt_subject, style, out_dir, instance_id, args.ref_image)
    print(write_config_echo(settings, out_dir))
    return EXIT_OK


def cmd_localize(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = Path(settings.output_path)
    backbone = create_backbone(settings)
    localizer = LeakageLocalizer(backbone, t_leak=settings.t_leak, t_rel=settings.t_rel)
    ref_prompt = PromptSpec.build([args.ref_subject], args.style, backbone.tokenize)
    tgt_prompt = PromptSpec.build([args.tgt_subject], args.style, backbone.tokenize)
    tgt_image = load_image(args.tgt)
    report = localizer.localize_posthoc(load_image(args.ref), tgt_image, ref_prompt, tgt_prompt)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(write_report(out_dir, "report", report))
    if report.overall:
        print(save_overlay(out_dir / "overlay.png", tgt_image, report.difference_map()))
    print(write_config_echo(settings, out_dir))
    print(f"leakage: {str(report.overall).lower()} ({report.leak_patches} patches)")
    if report.overall and args.exit_on_leak:
        return EXIT_LEAK
    return EXIT_OK


def command_generator(template: str, timeout: float) -> Any:
    """Wrap a shell command template as a theta -> (ref, tgt) image generator.

    The command must print the two image paths, whitespace separated, as the
    last output it writes.
    """

    def generate(theta: float) -> tuple[Path, Path]:
        command = shlex.split(template.format(theta=theta))
        completed = subprocess.run(command, capture_output=True, text=True, check=True, timeout=timeout)
        paths = completed.stdout.split()
        if len(paths) < 2:
            raise ValueError(f"generator printed {len(paths)} paths, expected 2")
        return Path(paths[-2]), Path(paths[-1])

    return generate


def cmd_tune(args: argparse.Namespace, settings: Settings) -> int:
    if "{theta}" not in args.generator:
        raise ValueError("generator template needs a {theta} placeholder")
    out_dir = Path(settings.output_path)
    backbone = create_backbone(settings)
    localizer = LeakageLocalizer(backbone, t_leak=settings.t_leak, t_rel=settings.t_rel)
    try:
        theta, trace = tune_external_parameter(
            command_generator(args.generator, args.timeout),
            PromptSpec.build([args.ref_subject], args.style, backbone.tokenize),
            PromptSpec.build([args.tgt_subject], args.style, backbone.tokenize),
            localizer,
            RunConfig.from_settings(settings).search,
            direction=args.direction,
            param_range=args.param_range,
            attempts=args.attempts,
        )
    except ExternalGeneratorError as e:
        if e.trace is not None:
            print(write_traces(out_dir / "trace.json", [e.trace]))
        raise
    print(write_traces(out_dir / "trace.json", [trace]))
    print(write_config_echo(settings, out_dir))
    print(f"theta*: {theta:.6f} after {trace.evaluations} evaluations ({trace.termination})")
    return EXIT_OK


def _services(settings: Settings, mock: bool, backbone: Optional[Backbone] = None) -> EvaluationService:
    if mock:
        mock_backbone = backbone if isinstance(backbone, MockBackbone) else create_backbone(settings.model_copy(update={"backbone": "mock"}))
        assert isinstance(mock_backbone, MockBackbone)
        return EvaluationService(
            embedder=MockBackboneEmbedder(mock_backbone),
            image_embedder=MockBackboneEmbedder(mock_backbone, flatten=True),
            lvlm=MockBackboneVisionClient(mock_backbone),
            concurrency=settings.request_concurrency,
        )
    options = {
        "api_key": settings.embedder_api_key,
        "timeout": settings.request_timeout_seconds,
        "retries": settings.request_retries,
    }
    return EvaluationService(
        embedder=HTTPEmbedder(settings.embedder_endpoint_url, settings.clip_model, **options)
        if settings.embedder_endpoint_url
        else None,
        image_embedder=HTTPEmbedder(settings.embedder_endpoint_url, settings.dino_model, **options)
        if settings.embedder_endpoint_url
        else None,
        lvlm=HTTPVisionChatClient(
            settings.lvlm_endpoint_url,
            settings.lvlm_model,
            api_key=settings.lvlm_api_key,
            timeout=settings.request_timeout_seconds,
            retries=settings.request_retries,
        )
        if settings.lvlm_endpoint_url
        else None,
        concurrency=settings.request_concurrency,
    )


def _instances(path: Path) -> list[EvaluationInstance]:
    return load_manifest_csv(path) if path.suffix.lower() == ".csv" else discover_instances(path)


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = Path(settings.output_path)
    service = _services(settings, args.mock)
    entries: Optional[list[PromptSetEntry]] = None
    if args.prompt_set is not None or args.limit is not None:
        entries = load_prompt_set(args.prompt_set)[: args.limit]
    reports: list[MetricReport] = []
    for source in args.source:
        method, separator, location = source.partition("=")
        if not separator:
            method, location = Path(source).name, source
        instances = _instances(Path(location))
        if entries is not None and Path(location).is_dir():
            instances = select_prompt_set(instances, entries)
        reports.append(asyncio.run(service.evaluate_method(method, instances, args.metrics)))
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(
        json.dumps([report.model_dump(mode="json") for report in reports], indent=2), encoding="utf-8"
    )
    table = format_report_table(reports)
    (out_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    scatter = write_scatter(reports, out_dir / "scatter.csv", out_dir / "scatter.png" if args.scatter else None)
    print(table)
    for path in (report_path, out_dir / "report.txt", scatter, write_config_echo(settings, out_dir)):
        print(path)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = Path(settings.output_path)
    backbone = create_backbone(settings)
    service = _services(settings, args.mock, backbone)
    entries = load_prompt_set(args.prompt_set)[: args.limit]
    report = asyncio.run(service.calibrate(backbone, entries, out_dir / "calibration", seed=settings.target_seed))
    path = out_dir / "calibration.json"
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    print(f"no-leak bound {report.no_leak_bound.mean}, full-leak bound {report.full_leak_bound.mean}")
    print(path)
    print(write_config_echo(settings, out_dir))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "localize": cmd_localize,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate" and args.prompt_set is None:
        if not args.style and args.ref_image is None:
            parser.error("generate requires --style (or --ref-image or --prompt-set)")
        if not args.ref_subject or not args.tgt_subject:
            parser.error("generate requires --ref-subject and at least one --tgt-subject")
    try:
        settings = resolve_settings(args)
        configure_logging(settings.log_level)
        return COMMANDS[args.command](args, settings)
    except (LeakGuardError, OSError, ValueError, subprocess.SubprocessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
