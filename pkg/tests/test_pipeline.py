"""End-to-end tests of the style alignment pipeline on the mock backbone."""

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from src.exceptions import ImageDecodeError, StepRangeError
from src.models.backbone import AttentionControl
from src.models.mock import MockSubject, PlantedLeak
from src.models.pipeline import RunConfig
from src.models.prompts import PromptSpec
from src.models.search import SearchConfig
from src.services.backbone import MockBackbone
from src.services.pipeline import MANIFEST_NAME, StylePipeline, read_manifest, slugify, write_aligned_set
from src.utils.images import save_image
from tests.conftest import PRECISION, make_spec, region_mask

PipelineFactory = Callable[..., StylePipeline]


@pytest.fixture
def pipeline(leaky_backbone: MockBackbone, pipeline_factory: PipelineFactory) -> StylePipeline:
    return pipeline_factory(leaky_backbone, reference_seed=0, target_seed=1)


class TestReference:
    def test_mask_matches_planted_region(self, pipeline: StylePipeline) -> None:
        bundle = pipeline.run_reference(pipeline.prompt("A house", "stickers style"))

        assert np.array_equal(bundle.masks[0].bits, region_mask("house"))
        assert bundle.diagnostics == ()
        assert bundle.image is not None
        assert pipeline.reference_runs == 1

    def test_reference_is_deterministic(self, pipeline: StylePipeline) -> None:
        prompt = pipeline.prompt("A house", "stickers style")

        first = pipeline.run_reference(prompt)
        second = pipeline.run_reference(prompt)

        assert np.array_equal(first.image, second.image)
        assert np.array_equal(first.subject_maps[0].values, second.subject_maps[0].values)

    def test_unlocalized_subject_keeps_empty_mask(self, pipeline_factory: PipelineFactory) -> None:
        backbone = MockBackbone(make_spec(extra_subjects=[MockSubject(noun="ghost", region=[])]))
        pipeline = pipeline_factory(backbone)

        bundle = pipeline.run_reference(pipeline.prompt("A ghost", "stickers style"))

        assert bundle.masks[0].empty
        assert bundle.diagnostics == ("no subject localized",)


class TestRunTarget:
    def test_alpha_one_equals_plain_shared_attention(self, pipeline: StylePipeline) -> None:
        bundle = pipeline.run_reference(pipeline.prompt("A house", "stickers style"))
        tgt = pipeline.prompt("A dog", "stickers style")

        scaled = pipeline.run_target(tgt, bundle, 1.0)
        plain = pipeline.backbone.run_generation(
            tgt, AttentionControl(reference=bundle.result.reference_trace()), seed=1
        )

        assert np.array_equal(scaled.image, plain.image)

    def test_half_generation_verdict_matches_full_run(self, pipeline: StylePipeline) -> None:
        bundle = pipeline.run_reference(pipeline.prompt("A house", "stickers style"))
        tgt = pipeline.prompt("A dog", "stickers style")
        half_step = pipeline.backbone.config.localization_step

        for alpha in (0.2, 0.8):
            half = pipeline.run_target(tgt, bundle, alpha, stop_at=half_step)
            full = pipeline.run_target(tgt, bundle, alpha)

            assert half.image is None
            assert half.partial is not None
            assert half.leak == full.leak == (alpha > 0.5)
            assert np.array_equal(half.report.leak_map, full.report.leak_map)

    def test_resume_reuses_half_verdict(self, pipeline: StylePipeline) -> None:
        bundle = pipeline.run_reference(pipeline.prompt("A house", "stickers style"))
        tgt = pipeline.prompt("A dog", "stickers style")
        half = pipeline.run_target(tgt, bundle, 0.3, stop_at=5)
        calls = pipeline.backbone.generation_calls

        final = pipeline.run_target(tgt, bundle, 0.3, resume=half)

        assert final.image is not None
        assert final.reports is half.reports
        assert pipeline.backbone.generation_calls == calls

    def test_resume_with_other_alphas(self, pipeline: StylePipeline) -> None:
        bundle = pipeline.run_reference(pipeline.prompt("A house", "stickers style"))
        tgt = pipeline.prompt("A dog", "stickers style")
        half = pipeline.run_target(tgt, bundle, 0.3, stop_at=5)

        with pytest.raises(ValueError):
            pipeline.run_target(tgt, bundle, 0.4, resume=half)

    def test_missing_bundle(self, pipeline: StylePipeline) -> None:
        with pytest.raises(ValueError):
            pipeline.run_target(pipeline.prompt("A dog", "stickers style"), None, 1.0)

    @pytest.mark.parametrize("alphas", [1.5, -0.2, (0.5, 0.5)])
    def test_invalid_alphas(self, pipeline: StylePipeline, alphas: object) -> None:
        bundle = pipeline.run_reference(pipeline.prompt("A house", "stickers style"))

        with pytest.raises(ValueError):
            pipeline.run_target(pipeline.prompt("A dog", "stickers style"), bundle, alphas)  # type: ignore[arg-type]

    def test_incomplete_reference(self, pipeline: StylePipeline) -> None:
        bundle = pipeline.run_reference(pipeline.prompt("A house", "stickers style"))
        bundle.result.completed_steps = 5

        with pytest.raises(StepRangeError):
            pipeline.run_target(pipeline.prompt("A dog", "stickers style"), bundle, 1.0)


class TestAdaptiveAlignment:
    @pytest.mark.parametrize("tau", [0.2, 0.5, 0.8])
    def test_finds_largest_clean_alpha(self, pipeline_factory: PipelineFactory, tau: float) -> None:
        backbone = MockBackbone(make_spec([PlantedLeak.step("house", tau)]))
        pipeline = pipeline_factory(backbone, reference_seed=0, target_seed=1)

        aligned = pipeline.align_set(
            pipeline.prompt("A house", "stickers style"), [pipeline.prompt("A dog", "stickers style")]
        )

        target = aligned.targets[0]
        trace = target.traces[0]
        alpha = target.alphas[0]
        assert tau - PRECISION <= alpha <= tau
        assert not target.state.leak
        assert target.state.image is not None
        assert trace.generation_passes <= 6
        assert trace.final_pass is not None
        assert trace.final_pass.resumed
        assert trace.final_pass.sanity_leak is False
        assert trace.termination == "converged"

    def test_clean_at_full_scale(self, backbone: MockBackbone, pipeline_factory: PipelineFactory) -> None:
        pipeline = pipeline_factory(backbone)

        aligned = pipeline.align_set(
            pipeline.prompt("A house", "stickers style"), [pipeline.prompt("A dog", "stickers style")]
        )

        trace = aligned.targets[0].traces[0]
        assert aligned.targets[0].alphas == (1.0,)
        assert trace.termination == "no-leak-at-1"
        assert trace.generation_passes == 1

    def test_reference_runs_once_per_set(self, pipeline: StylePipeline) -> None:
        targets = [pipeline.prompt(noun, "stickers style") for noun in ("A dog", "A cat", "A lion")]

        aligned = pipeline.align_set(pipeline.prompt("A house", "stickers style"), targets)

        passes = sum(trace.generation_passes for target in aligned.targets for trace in target.traces)
        assert pipeline.reference_runs == 1
        assert pipeline.backbone.generation_calls == 1 + passes
        assert [target.state.prompt for target in aligned.targets] == targets

    def test_targets_are_independent(self, pipeline_factory: PipelineFactory) -> None:
        leaks = [
            PlantedLeak.step("house", 0.3, target="dog"),
            PlantedLeak.step("house", 0.6, target="cat"),
            PlantedLeak.step("house", 0.9, target="lion"),
        ]
        pipeline = pipeline_factory(MockBackbone(make_spec(leaks)))
        nouns = ["A dog", "A cat", "A lion"]
        ref = pipeline.prompt("A house", "stickers style")

        forward = pipeline.align_set(ref, [pipeline.prompt(noun, "stickers style") for noun in nouns])
        backward = pipeline.align_set(ref, [pipeline.prompt(noun, "stickers style") for noun in reversed(nouns)])

        alphas = [target.alphas[0] for target in forward.targets]
        for alpha, tau in zip(alphas, (0.3, 0.6, 0.9)):
            assert tau - PRECISION <= alpha <= tau
        assert [target.alphas[0] for target in backward.targets] == alphas[::-1]

    def test_multi_subject_reference(self, pipeline_factory: PipelineFactory) -> None:
        leaks = [PlantedLeak.step("house", 0.4), PlantedLeak.step("cat", 0.8)]
        pipeline = pipeline_factory(MockBackbone(make_spec(leaks)))

        aligned = pipeline.align_set(
            pipeline.prompt(["A house", "A cat"], "stickers style"),
            [pipeline.prompt("A dog", "stickers style")],
        )

        target = aligned.targets[0]
        assert len(target.traces) == 2
        assert 0.4 - PRECISION <= target.alphas[0] <= 0.4
        assert 0.8 - PRECISION <= target.alphas[1] <= 0.8
        assert not target.state.leak

    def test_multi_subject_order_independence(self, pipeline_factory: PipelineFactory) -> None:
        leaks = [PlantedLeak.step("house", 0.4), PlantedLeak.step("cat", 0.8)]
        pipeline = pipeline_factory(MockBackbone(make_spec(leaks)))
        target = [pipeline.prompt("A dog", "stickers style")]

        forward = pipeline.align_set(pipeline.prompt(["A house", "A cat"], "stickers style"), target)
        backward = pipeline.align_set(pipeline.prompt(["A cat", "A house"], "stickers style"), target)

        assert forward.targets[0].alphas == backward.targets[0].alphas[::-1]
        assert not backward.targets[0].state.leak

    def test_fixed_alpha_skips_search(self, leaky_backbone: MockBackbone, pipeline_factory: PipelineFactory) -> None:
        pipeline = pipeline_factory(leaky_backbone, fixed_alpha=1.0)

        aligned = pipeline.align_set(
            pipeline.prompt("A house", "stickers style"), [pipeline.prompt("A dog", "stickers style")]
        )

        trace = aligned.targets[0].traces[0]
        assert trace.termination == "fixed"
        assert trace.probes == []
        assert aligned.targets[0].state.leak
        assert leaky_backbone.generation_calls == 2

    def test_coarser_precision(self, leaky_backbone: MockBackbone) -> None:
        pipeline = StylePipeline(leaky_backbone, RunConfig(search=SearchConfig(precision=0.125)))

        aligned = pipeline.align_set(
            pipeline.prompt("A house", "stickers style"), [pipeline.prompt("A dog", "stickers style")]
        )

        assert 0.5 - 0.125 <= aligned.targets[0].alphas[0] <= 0.5
        assert aligned.targets[0].traces[0].evaluations <= 4

    def test_empty_targets(self, pipeline: StylePipeline) -> None:
        with pytest.raises(ValueError):
            pipeline.align_set(pipeline.prompt("A house", "stickers style"), [])


class TestRealReference:
    def test_inverted_reference_matches_generated(self, pipeline: StylePipeline, tmp_path: Path) -> None:
        ref = pipeline.prompt("A house", "stickers style")
        targets = [pipeline.prompt("A dog", "stickers style")]
        generated = pipeline.align_set(ref, targets)
        image_path = save_image(tmp_path / "reference.png", generated.reference.image)

        inverted = pipeline.align_from_real(image_path, ref, targets)

        assert inverted.reference.provenance == "inverted"
        assert inverted.targets[0].traces[0].provenance == "inverted"
        assert np.array_equal(inverted.reference.masks[0].bits, region_mask("house"))
        assert inverted.targets[0].alphas == generated.targets[0].alphas

    def test_unreadable_image(self, pipeline: StylePipeline, tmp_path: Path) -> None:
        path = tmp_path / "broken.png"
        path.write_bytes(b"not an image")

        with pytest.raises(ImageDecodeError):
            pipeline.align_from_real(
                path, pipeline.prompt("A house", "stickers style"), [pipeline.prompt("A dog", "stickers style")]
            )


class TestOutputs:
    def test_writes_instance_directory(self, pipeline: StylePipeline, tmp_path: Path) -> None:
        aligned = pipeline.align_set(
            pipeline.prompt("A house", "stickers style"),
            [pipeline.prompt("A dog", "stickers style"), pipeline.prompt("A cat", "stickers style")],
        )
        directory = tmp_path / "001-stickers-style"

        manifest = write_aligned_set(aligned, directory, "001")

        assert (directory / MANIFEST_NAME).is_file()
        assert read_manifest(directory) == manifest
        assert manifest.reference_subjects == ["A house"]
        assert [target.image for target in manifest.targets] == ["target_00.png", "target_01.png"]
        for name in ("reference.png", "reference_mask_0.png", "reference_masks.npz", "target_00_trace.json"):
            assert (directory / name).is_file()
        assert (directory / manifest.targets[0].reports[0]).is_file()
        assert all(target.leakage is False for target in manifest.targets)

    def test_leaking_target_gets_overlay(self, leaky_backbone: MockBackbone, pipeline_factory: PipelineFactory, tmp_path: Path) -> None:
        pipeline = pipeline_factory(leaky_backbone, fixed_alpha=1.0)
        aligned = pipeline.align_set(
            pipeline.prompt("A house", "stickers style"), [pipeline.prompt("A dog", "stickers style")]
        )

        manifest = write_aligned_set(aligned, tmp_path, "leaky")

        assert manifest.targets[0].leakage is True
        assert manifest.targets[0].overlays == ["target_00_overlay_0.png"]
        assert (tmp_path / "target_00_overlay_0.png").is_file()

    def test_every_leaking_subject_gets_an_overlay(self, pipeline_factory: PipelineFactory, tmp_path: Path) -> None:
        leaks = [PlantedLeak.step("house", 0.4), PlantedLeak.step("cat", 0.8)]
        pipeline = pipeline_factory(MockBackbone(make_spec(leaks)), fixed_alpha=1.0)
        aligned = pipeline.align_set(
            pipeline.prompt(["A house", "A cat"], "stickers style"), [pipeline.prompt("A dog", "stickers style")]
        )

        manifest = write_aligned_set(aligned, tmp_path, "two-subjects")

        assert manifest.targets[0].overlays == ["target_00_overlay_0.png", "target_00_overlay_1.png"]
        assert all((tmp_path / name).is_file() for name in manifest.targets[0].overlays)

    @pytest.mark.parametrize(
        ("text", "slug"), [("Stickers Style", "stickers-style"), ("  ", "instance"), ("3D render!", "3d-render")]
    )
    def test_slugify(self, text: str, slug: str) -> None:
        assert slugify(text) == slug


def test_prompt_helper(pipeline: StylePipeline) -> None:
    prompt: PromptSpec = pipeline.prompt(["A house", "A cat"], "stickers style")

    assert prompt.full_prompt == "A house and A cat in stickers style"
    assert [subject.token_index for subject in prompt.subjects] == [2, 5]
