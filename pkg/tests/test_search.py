"""Tests for the bisection and the external parameter tuner."""

from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from pydantic import ValidationError
from pytest_mock import MockerFixture

from src.exceptions import ExternalGeneratorError
from src.models.prompts import PromptSpec
from src.models.search import AlignmentTrace, Probe, SearchConfig, evaluation_budget
from src.services.search import binary_search_scale, bisect_clean_boundary, tune_external_parameter

PRECISION = 0.03125


def step_predicate(threshold: float):
    return lambda alpha: alpha > threshold


class TestBinarySearchScale:
    def test_converges_below_threshold(self) -> None:
        alpha, trace = binary_search_scale(step_predicate(0.6), SearchConfig())

        assert alpha == pytest.approx(0.59375)
        assert trace.evaluations == 6
        assert trace.termination == "converged"
        assert [probe.value for probe in trace.probes][:3] == [1.0, 0.5, 0.75]

    def test_clean_at_one(self) -> None:
        alpha, trace = binary_search_scale(lambda alpha: False, SearchConfig())

        assert alpha == 1.0
        assert trace.evaluations == 1
        assert trace.termination == "no-leak-at-1"

    def test_leaky_everywhere(self) -> None:
        alpha, trace = binary_search_scale(lambda alpha: True, SearchConfig())

        assert alpha == 0.0
        assert trace.termination == "leak-at-0"
        assert trace.probes[-1].value == 0.0
        assert trace.evaluations == evaluation_budget(PRECISION) + 1

    def test_random_thresholds(self) -> None:
        rng = np.random.default_rng(50)
        budget = evaluation_budget(PRECISION)
        for tau in rng.uniform(0.01, 0.99, size=100):
            alpha, trace = binary_search_scale(step_predicate(float(tau)), SearchConfig())

            assert alpha <= tau
            assert tau - alpha <= PRECISION
            assert trace.evaluations <= budget + (alpha == 0.0)
            assert trace.monotone
            assert not any(probe.leak for probe in trace.probes if probe.value == alpha)

    def test_last_midpoint_is_checked_before_the_floor(self) -> None:
        alpha, trace = binary_search_scale(step_predicate(0.046), SearchConfig())

        assert alpha == pytest.approx(0.03125)
        assert trace.termination == "converged"
        assert trace.evaluations == evaluation_budget(PRECISION)
        assert 0.0 not in [probe.value for probe in trace.probes]

    def test_floor_is_verified_below_first_grid_point(self) -> None:
        alpha, trace = binary_search_scale(step_predicate(0.01), SearchConfig())

        assert alpha == 0.0
        assert trace.termination == "converged"
        assert trace.probes[-1] == Probe(value=0.0, leak=False, mode="half")

    def test_result_matches_fine_grid_scan(self) -> None:
        rng = np.random.default_rng(51)
        grid = np.arange(0, 1.0 + 1e-12, PRECISION / 4)
        for tau in rng.uniform(0.05, 0.95, size=20):
            best = float(grid[grid <= tau].max())

            alpha, _ = binary_search_scale(step_predicate(float(tau)), SearchConfig())

            assert abs(alpha - best) <= PRECISION

    def test_finer_precision(self) -> None:
        config = SearchConfig(precision=1 / 1024)

        alpha, trace = binary_search_scale(step_predicate(0.3), config)

        assert 0.3 - 1 / 1024 <= alpha <= 0.3
        assert trace.evaluations <= 11


class TestBisectCleanBoundary:
    def test_degenerate_range(self) -> None:
        value, trace = bisect_clean_boundary(lambda value: True, SearchConfig(), 0.3, 0.3)

        assert value == 0.3
        assert trace.evaluations == 1

    def test_decreasing_direction(self) -> None:
        # leaks below 0.3, so the high end is clean
        value, trace = bisect_clean_boundary(lambda theta: theta < 0.3, SearchConfig(), 1.0, 0.0)

        assert 0.3 <= value <= 0.3 + PRECISION
        assert not trace.leak_increasing
        assert trace.monotone

    def test_probe_modes_are_recorded(self) -> None:
        _, trace = bisect_clean_boundary(step_predicate(0.5), SearchConfig(), mode="full")

        assert {probe.mode for probe in trace.probes} == {"full"}


class TestTraceAndConfig:
    def test_clean_above_leaky_is_not_monotone(self) -> None:
        trace = AlignmentTrace(
            probes=[Probe(value=1.0, leak=True), Probe(value=0.5, leak=True), Probe(value=0.75, leak=False)]
        )

        assert not trace.monotone

    def test_error_probes_are_ignored(self) -> None:
        trace = AlignmentTrace(
            probes=[Probe(value=1.0, leak=True), Probe(value=0.9, leak=True, error="boom"), Probe(value=0.5, leak=False)]
        )

        assert trace.monotone

    @pytest.mark.parametrize(("precision", "budget"), [(0.03125, 6), (0.03, 7), (1 / 1024, 11), (1.0, 1)])
    def test_budget(self, precision: float, budget: int) -> None:
        assert evaluation_budget(precision) == budget
        assert SearchConfig(precision=precision).eval_cap == budget

    def test_cap_below_budget_is_rejected(self) -> None:
        with pytest.raises(ValidationError):
            SearchConfig(precision=PRECISION, max_evals=3)

    @pytest.mark.parametrize("precision", [0.0, -0.1, 1.5])
    def test_invalid_precision(self, precision: float) -> None:
        with pytest.raises(ValidationError):
            SearchConfig(precision=precision)


class TestTuneExternalParameter:
    @pytest.fixture
    def prompts(self) -> tuple[PromptSpec, PromptSpec]:
        tokenize = lambda text: ["<bos>", *text.lower().split()]  # noqa: E731
        return (
            PromptSpec.build(["A house"], "", tokenize),
            PromptSpec.build(["A dog"], "", tokenize),
        )

    @pytest.fixture
    def localizer(self, mocker: MockerFixture):
        mocker.patch("src.services.search.service.load_image", side_effect=lambda path: path.name)
        stub = mocker.Mock()
        stub.threshold = 0.875
        stub.localize_posthoc.side_effect = lambda ref, tgt, *args: SimpleNamespace(
            overall=float(tgt) > stub.threshold
        )
        return stub

    @staticmethod
    def generator(theta: float) -> tuple[Path, Path]:
        return Path("reference"), Path(repr(theta))

    def test_finds_largest_clean_parameter(self, prompts, localizer) -> None:
        theta, trace = tune_external_parameter(self.generator, *prompts, localizer, SearchConfig())

        assert 0.875 - PRECISION <= theta <= 0.875
        assert {probe.mode for probe in trace.probes} == {"posthoc"}
        assert localizer.localize_posthoc.call_count == trace.evaluations

    def test_decreasing_parameter(self, prompts, localizer) -> None:
        localizer.localize_posthoc.side_effect = lambda ref, tgt, *args: SimpleNamespace(
            overall=float(tgt) < 3.0
        )

        theta, _ = tune_external_parameter(
            self.generator, *prompts, localizer, SearchConfig(), direction="decreasing", param_range=(0.0, 10.0)
        )

        assert 3.0 <= theta <= 3.0 + 10.0 * PRECISION

    def test_degenerate_range(self, prompts, localizer) -> None:
        theta, trace = tune_external_parameter(
            self.generator, *prompts, localizer, SearchConfig(), param_range=(0.5, 0.5)
        )

        assert theta == 0.5
        assert trace.evaluations == 1

    def test_transient_failure_is_retried(self, prompts, localizer) -> None:
        calls = {"count": 0}

        def flaky(theta: float) -> tuple[Path, Path]:
            calls["count"] += 1
            if calls["count"] == 1:
                raise RuntimeError("generator crashed")
            return self.generator(theta)

        theta, trace = tune_external_parameter(flaky, *prompts, localizer, SearchConfig())

        assert 0.875 - PRECISION <= theta <= 0.875
        assert trace.probes[0].error == "RuntimeError: generator crashed"
        assert trace.monotone

    def test_persistent_failure_raises(self, prompts, localizer) -> None:
        def broken(theta: float) -> tuple[Path, Path]:
            raise OSError("no output written")

        with pytest.raises(ExternalGeneratorError) as info:
            tune_external_parameter(broken, *prompts, localizer, SearchConfig(), attempts=2)

        assert info.value.trace is not None
        assert info.value.trace.evaluations == 2
        assert all(probe.error for probe in info.value.trace.probes)

    def test_failure_keeps_answered_verdicts(self, prompts, localizer) -> None:
        def fails_at_three_quarters(theta: float) -> tuple[Path, Path]:
            if theta == 0.75:
                raise OSError("no output written")
            return self.generator(theta)

        with pytest.raises(ExternalGeneratorError) as info:
            tune_external_parameter(fails_at_three_quarters, *prompts, localizer, SearchConfig(), attempts=1)

        probes = info.value.trace.probes
        assert [probe.value for probe in probes] == [1.0, 0.5, 0.75]
        assert [probe.error is None for probe in probes] == [True, True, False]
        assert probes[1].leak is False

    def test_inverted_range_is_rejected(self, prompts, localizer) -> None:
        with pytest.raises(ValueError):
            tune_external_parameter(self.generator, *prompts, localizer, SearchConfig(), param_range=(1.0, 0.0))
