"""Tests for the prompt set, metrics, LVLM protocol and evaluation clients."""

import json
from pathlib import Path

import httpx
import numpy as np
import pytest
from pytest_mock import MockerFixture

from src.exceptions import EvaluationError, PromptSetParseError, ServiceRequestError
from src.models.evaluation import EvaluationInstance, MetricReport, MetricSummary, PromptSetEntry
from src.models.pipeline import RunConfig
from src.services.backbone import MockBackbone
from src.services.evaluation import (
    ANSWER_SUFFIX,
    DEFAULT_PROMPT_SET,
    CannedVisionChatClient,
    EvaluationService,
    HTTPEmbedder,
    HTTPVisionChatClient,
    MockBackboneEmbedder,
    MockBackboneVisionClient,
    TableEmbedder,
    cl_metric,
    cosine,
    discover_instances,
    format_report_table,
    load_manifest_csv,
    load_prompt_set,
    lvlm_protocol,
    parse_prompt_line,
    parse_yes_no,
    render_question,
    set_consistency,
    text_alignment,
    write_scatter,
)
from src.services.pipeline import StylePipeline, write_aligned_set


class TestPromptSet:
    def test_bundled_set(self) -> None:
        entries = load_prompt_set()

        assert len(entries) == 100
        assert entries[0] == PromptSetEntry(subjects=["A house", "A dog", "A lion", "A hippo"], style="stickers style")
        assert all(len(entry.subjects) == 4 for entry in entries)

    def test_bundled_lines_render_back(self) -> None:
        lines = [line for line in DEFAULT_PROMPT_SET.read_text(encoding="utf-8").splitlines() if line.strip()]

        for line, entry in zip(lines, load_prompt_set(), strict=True):
            assert entry.render() == line.strip()

    def test_style_may_contain_commas(self) -> None:
        entry = parse_prompt_line("{A rocket, An alien} in 3D render, animation studio style.")

        assert entry.style == "3D render, animation studio style"

    def test_blank_lines_are_skipped(self, tmp_path: Path) -> None:
        path = tmp_path / "prompts.txt"
        path.write_text("\n{A cat} in sketch style.\n\n", encoding="utf-8")

        assert load_prompt_set(path) == [PromptSetEntry(subjects=["A cat"], style="sketch style")]

    def test_empty_file(self, tmp_path: Path) -> None:
        path = tmp_path / "empty.txt"
        path.write_text("", encoding="utf-8")

        assert load_prompt_set(path) == []

    @pytest.mark.parametrize(
        ("line", "reason"),
        [
            ("{A cat, A dog in sketch style.", "missing closing brace"),
            ("{A cat, A dog} in sketch style", "missing final period"),
            ("{A cat, , A dog} in sketch style.", "empty subject"),
        ],
    )
    def test_malformed_lines(self, tmp_path: Path, line: str, reason: str) -> None:
        path = tmp_path / "prompts.txt"
        path.write_text("{A cat} in sketch style.\n" + line + "\n", encoding="utf-8")

        with pytest.raises(PromptSetParseError) as info:
            load_prompt_set(path)

        assert info.value.line_number == 2
        assert info.value.reason == reason


class TestAnswers:
    @pytest.mark.parametrize(
        ("reply", "answer"),
        [
            ("No.", False),
            ("Yes, there is a circle in the image.", True),
            ("  yes", True),
            ("The answer is NO", False),
            ("Maybe", None),
            ("Nobody knows", None),
            ("", None),
        ],
    )
    def test_parse_yes_no(self, reply: str, answer: object) -> None:
        assert parse_yes_no(reply) is answer

    def test_questions_carry_the_answer_format(self) -> None:
        text = render_question("Q1", "A house", "A dog")

        assert text == f"Are there any house visual features in this dog image? {ANSWER_SUFFIX}"
        assert render_question("Q2", "An apple", "A dog").startswith("Is there any apple in this image?")
        assert render_question("Q3", "A house", "Clock").startswith("Is there any Clock in this image?")

    @pytest.mark.parametrize(
        ("question", "reply", "outcome"),
        [
            ("Q1", "No.", "success"),
            ("Q2", "Yes.", "failure"),
            ("Q3", "Yes, there is a dog in the image.", "success"),
            ("Q3", "I am not sure.", "indeterminate"),
        ],
    )
    async def test_protocol_outcomes(self, question: str, reply: str, outcome: str) -> None:
        client = CannedVisionChatClient(default=reply)

        result = await lvlm_protocol(Path("t.png"), "A house", "A dog", question, client)  # type: ignore[arg-type]

        assert result == outcome
        assert client.requests[0][1].endswith(ANSWER_SUFFIX)

    async def test_service_failure_is_indeterminate(self, mocker: MockerFixture) -> None:
        client = mocker.Mock()
        client.ask = mocker.AsyncMock(side_effect=ServiceRequestError("down"))

        assert await lvlm_protocol(Path("t.png"), "A house", "A dog", "Q2", client) == "indeterminate"


class TestCosineMetrics:
    def test_cosine(self) -> None:
        assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == pytest.approx(1.0)
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
        assert cosine(np.zeros(2), np.array([1.0, 1.0])) == 0.0
        with pytest.raises(EvaluationError):
            cosine(np.zeros(2), np.zeros(3))

    async def test_image_text_scores(self) -> None:
        embedder = TableEmbedder(
            images={"a.png": [1.0, 0.0], "b.png": [0.0, 1.0]},
            texts={"A house": [1.0, 0.0], "A dog": [0.0, 1.0]},
        )

        cl = await cl_metric([Path("a.png"), Path("b.png")], "A house", embedder)
        text = await text_alignment([Path("b.png")], "A dog", embedder)

        assert cl.mean == pytest.approx(0.5)
        assert cl.count == 2
        assert text.mean == pytest.approx(1.0)

    async def test_unembeddable_images_are_counted(self) -> None:
        embedder = TableEmbedder(images={"a.png": [1.0, 0.0]}, texts={"A house": [1.0, 0.0]})

        summary = await cl_metric([Path("a.png"), Path("missing.png")], "A house", embedder)

        assert summary.count == 1
        assert summary.failed == 1

    async def test_identical_images_are_consistent(self) -> None:
        embedder = TableEmbedder(images={"ref.png": [0.3, 0.4], "t.png": [0.3, 0.4]})

        summary = await set_consistency([Path("t.png")], Path("ref.png"), embedder)

        assert summary.mean == pytest.approx(1.0)

    async def test_empty_image_list(self) -> None:
        embedder = TableEmbedder(images={}, texts={"A house": [1.0]})

        with pytest.raises(EvaluationError):
            await cl_metric([], "A house", embedder)
        with pytest.raises(EvaluationError):
            await set_consistency([], Path("ref.png"), embedder)


class TestEvaluationService:
    @pytest.fixture
    def instances(self, tmp_path: Path) -> list[EvaluationInstance]:
        (tmp_path / "ref.png").write_bytes(b"")
        instances = []
        for index in range(8):
            (tmp_path / f"t{index}.png").write_bytes(b"")
            instances.append(
                EvaluationInstance(
                    entry_id=f"e{index}",
                    reference_path=tmp_path / "ref.png",
                    target_path=tmp_path / f"t{index}.png",
                    ref_subject="A house",
                    tgt_subject="A dog",
                )
            )
        instances.append(
            EvaluationInstance(
                entry_id="e9",
                reference_path=tmp_path / "ref.png",
                target_path=tmp_path / "gone.png",
                ref_subject="A house",
                tgt_subject="A dog",
            )
        )
        return instances

    @pytest.fixture
    def service(self) -> EvaluationService:
        leaky = {"t0.png", "t1.png"}
        images = {f"t{index}.png": [1.0, 0.0] if f"t{index}.png" in leaky else [0.0, 1.0] for index in range(8)}
        images["ref.png"] = [1.0, 0.0]
        embedder = TableEmbedder(images=images, texts={"A house": [1.0, 0.0], "A dog": [0.0, 1.0]})

        def reply(image: Path, text: str) -> str:
            if "visual features" in text:
                return "No"
            if text.startswith("Is there any house"):
                return "Yes" if image.name in leaky else "No."
            return "Maybe" if image.name in {"t6.png", "t7.png"} else "Yes, there is a dog."

        return EvaluationService(embedder, embedder, CannedVisionChatClient(default=reply), concurrency=3)

    async def test_hand_computed_scores(
        self, service: EvaluationService, instances: list[EvaluationInstance]
    ) -> None:
        report = await service.evaluate_method("aligned", reversed(instances))

        assert report.instance_count == 8
        assert report.skipped == ["e9"]
        assert report.metrics["cl"].mean == pytest.approx(0.25)
        assert report.metrics["cl"].std == pytest.approx(np.sqrt(0.25 * 0.75))
        assert report.metrics["text"].mean == pytest.approx(0.75)
        assert report.metrics["consistency"].mean == pytest.approx(0.25)
        assert report.lvlm["Q1"].success_rate == 1.0
        assert report.lvlm["Q2"].success_rate == pytest.approx(0.75)
        assert report.lvlm["Q3"].success_rate == 1.0
        assert report.lvlm["Q3"].indeterminate == 2
        assert "consistency_caveat" in report.metadata

        table = format_report_table([report])
        assert "aligned" in table
        assert "75.00% (8)" in table

    async def test_metric_selection(self, service: EvaluationService, instances: list[EvaluationInstance]) -> None:
        report = await service.evaluate_method("aligned", instances, ["cl"])

        assert set(report.metrics) == {"cl"}
        assert report.lvlm == {}

    @pytest.mark.parametrize("metrics", [[], ["fid"]])
    async def test_invalid_metric_selection(
        self, service: EvaluationService, instances: list[EvaluationInstance], metrics: list[str]
    ) -> None:
        with pytest.raises(EvaluationError):
            await service.evaluate_method("aligned", instances, metrics)

    async def test_missing_client(self, instances: list[EvaluationInstance]) -> None:
        with pytest.raises(EvaluationError):
            await EvaluationService().evaluate_method("aligned", instances, ["lvlm"])

    def test_scatter(self, tmp_path: Path) -> None:
        reports = [
            MetricReport(method="ours", metrics={"text": MetricSummary(mean=0.3), "consistency": MetricSummary(mean=0.6)}),
            MetricReport(method="cl-only", metrics={"cl": MetricSummary(mean=0.2)}),
        ]

        csv_path = write_scatter(reports, tmp_path / "scatter.csv", tmp_path / "scatter.png")

        rows = csv_path.read_text(encoding="utf-8").splitlines()
        assert rows == ["method,text_alignment,set_consistency", "ours,0.3,0.6"]
        assert (tmp_path / "scatter.png").is_file()


class TestOnMockOutputs:
    async def test_search_lowers_leakage_metrics(self, leaky_backbone: MockBackbone, tmp_path: Path) -> None:
        ref = StylePipeline(leaky_backbone).prompt("A house", "stickers style")
        tgt = StylePipeline(leaky_backbone).prompt("A dog", "stickers style")
        for name, fixed in (("aligned", None), ("shared", 1.0)):
            pipeline = StylePipeline(leaky_backbone, RunConfig(fixed_alpha=fixed))
            write_aligned_set(pipeline.align_set(ref, [tgt]), tmp_path / name / "000-house", "000-house")
        service = EvaluationService(
            MockBackboneEmbedder(leaky_backbone),
            MockBackboneEmbedder(leaky_backbone, flatten=True),
            MockBackboneVisionClient(leaky_backbone),
        )

        aligned = await service.evaluate_method("aligned", discover_instances(tmp_path / "aligned"))
        shared = await service.evaluate_method("shared", discover_instances(tmp_path / "shared"))

        assert aligned.instance_count == shared.instance_count == 1
        assert aligned.metrics["cl"].mean < shared.metrics["cl"].mean
        assert aligned.lvlm["Q2"].success_rate == 1.0
        assert shared.lvlm["Q2"].success_rate == 0.0
        assert aligned.lvlm["Q3"].success_rate == 1.0

    def test_discover_instances(self, pipeline_factory, leaky_backbone: MockBackbone, tmp_path: Path) -> None:
        pipeline = pipeline_factory(leaky_backbone, fixed_alpha=0.0)
        aligned = pipeline.align_set(
            pipeline.prompt("A house", "stickers style"),
            [pipeline.prompt("A dog", "stickers style"), pipeline.prompt("A cat", "stickers style")],
        )
        write_aligned_set(aligned, tmp_path / "007-stickers-style", "007")

        instances = discover_instances(tmp_path)

        assert [instance.entry_id for instance in instances] == ["007/00", "007/01"]
        assert instances[1].tgt_subject == "A cat"
        assert instances[0].target_path.is_file()

    async def test_calibration_bounds(self, backbone: MockBackbone, tmp_path: Path) -> None:
        service = EvaluationService(MockBackboneEmbedder(backbone))
        entry = PromptSetEntry(subjects=["A house", "A dog", "A cat", "A lion"], style="stickers style")

        report = await service.calibrate(backbone, [entry], tmp_path)

        assert report.entries == 1
        assert report.no_leak_bound.count == report.full_leak_bound.count == 3
        assert report.no_leak_bound.mean < report.full_leak_bound.mean

    async def test_calibration_needs_entries(self, backbone: MockBackbone, tmp_path: Path) -> None:
        with pytest.raises(EvaluationError):
            await EvaluationService(MockBackboneEmbedder(backbone)).calibrate(backbone, [], tmp_path)


class TestManifestCsv:
    def test_relative_paths_resolve_against_csv(self, tmp_path: Path) -> None:
        path = tmp_path / "method.csv"
        path.write_text(
            "entry_id,reference_path,target_path,ref_subject,tgt_subject\n"
            "001/00,images/ref.png,images/t.png,A house,A dog\n",
            encoding="utf-8",
        )

        instances = load_manifest_csv(path)

        assert instances[0].target_path == tmp_path / "images" / "t.png"
        assert instances[0].tgt_subject == "A dog"

    def test_missing_column(self, tmp_path: Path) -> None:
        path = tmp_path / "method.csv"
        path.write_text("entry_id,target_path\n001,t.png\n", encoding="utf-8")

        with pytest.raises(EvaluationError):
            load_manifest_csv(path)


class TestHTTPClients:
    async def test_embedder_posts_json(self, tmp_path: Path) -> None:
        image = tmp_path / "t.png"
        image.write_bytes(b"png-bytes")
        seen: list[tuple[str, dict]] = []

        def handler(request: httpx.Request) -> httpx.Response:
            seen.append((request.url.path, json.loads(request.content)))
            return httpx.Response(200, json={"embedding": [0.5, 0.5]})

        client = httpx.AsyncClient(transport=httpx.MockTransport(handler))
        embedder = HTTPEmbedder("http://embed.local/", "clip", client=client)

        vector = await embedder.embed_image(image)
        await embedder.embed_text("A house")
        await embedder.aclose()

        np.testing.assert_allclose(vector, [0.5, 0.5])
        assert [path for path, _ in seen] == ["/embed/image", "/embed/text"]
        assert seen[1][1] == {"model": "clip", "text": "A house"}

    async def test_failed_requests_raise(self) -> None:
        client = httpx.AsyncClient(transport=httpx.MockTransport(lambda request: httpx.Response(503)))
        embedder = HTTPEmbedder("http://embed.local", "clip", retries=1, client=client)

        with pytest.raises(ServiceRequestError):
            await embedder.embed_text("A house")

    async def test_chat_client_reads_first_choice(self, tmp_path: Path) -> None:
        image = tmp_path / "t.png"
        image.write_bytes(b"png-bytes")

        def handler(request: httpx.Request) -> httpx.Response:
            body = json.loads(request.content)
            assert body["messages"][0]["content"][0]["text"] == "Is there any A dog in this image?"
            return httpx.Response(200, json={"choices": [{"message": {"content": "Yes."}}]})

        client = httpx.AsyncClient(transport=httpx.MockTransport(handler))
        chat = HTTPVisionChatClient("http://lvlm.local/v1", "gpt-4o", client=client)

        assert await chat.ask(image, "Is there any A dog in this image?") == "Yes."

    def test_missing_endpoint(self) -> None:
        with pytest.raises(ServiceRequestError):
            HTTPEmbedder("", "clip")
