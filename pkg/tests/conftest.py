"""Shared fixtures: small mock backbones, prompts and pipelines."""

from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Optional

import numpy as np
import pytest

from src.models.mock import MockSpec, MockSubject, PlantedLeak
from src.models.pipeline import RunConfig
from src.models.prompts import PromptSpec
from src.services.backbone import MockBackbone
from src.services.pipeline import StylePipeline

GRID = (12, 12)
STYLE = "stickers style"
PRECISION = 0.03125

REGIONS = {
    "house": MockSpec.block(GRID, 1, 1, 4, 4),
    "dog": MockSpec.block(GRID, 7, 7, 4, 4),
    "cat": MockSpec.block(GRID, 1, 7, 3, 4),
    "lion": MockSpec.block(GRID, 7, 1, 3, 3),
}


def make_spec(
    leaks: Sequence[PlantedLeak] = (),
    extra_subjects: Sequence[MockSubject] = (),
    **kwargs: object,
) -> MockSpec:
    subjects = [MockSubject(noun=noun, region=region) for noun, region in REGIONS.items()]
    return MockSpec(subjects=[*subjects, *extra_subjects], leaks=list(leaks), **kwargs)


def region_mask(noun: str) -> np.ndarray:
    bits = np.zeros(GRID[0] * GRID[1], dtype=bool)
    bits[REGIONS[noun]] = True
    return bits.reshape(GRID)


@pytest.fixture
def spec_factory() -> Callable[..., MockSpec]:
    return make_spec


@pytest.fixture
def backbone() -> MockBackbone:
    """Mock without planted leaks."""
    return MockBackbone(make_spec())


@pytest.fixture
def leaky_backbone() -> MockBackbone:
    """House leaks into any target once alpha exceeds 0.5."""
    return MockBackbone(make_spec([PlantedLeak.step("house", 0.5)]))


@pytest.fixture
def prompt_factory() -> Callable[..., PromptSpec]:
    def build(subjects: object, backbone: MockBackbone, style: str = STYLE) -> PromptSpec:
        names = [subjects] if isinstance(subjects, str) else list(subjects)  # type: ignore[call-overload]
        return PromptSpec.build(names, style, backbone.tokenize)

    return build


@pytest.fixture
def pipeline_factory() -> Callable[..., StylePipeline]:
    def build(backbone: MockBackbone, fixed_alpha: Optional[float] = None, **kwargs: object) -> StylePipeline:
        return StylePipeline(backbone, RunConfig(fixed_alpha=fixed_alpha, **kwargs))  # type: ignore[arg-type]

    return build


@pytest.fixture
def spec_file(tmp_path: Path) -> Callable[[MockSpec], Path]:
    def write(spec: MockSpec) -> Path:
        path = tmp_path / "mock_spec.json"
        path.write_text(spec.model_dump_json(), encoding="utf-8")
        return path

    return write
