"""Deterministic mock backbone.

Patch content is a vector per bottleneck patch: a shared background component,
the prototype of every subject planted at that patch, and a small style term
accumulated from the shared self-attention outputs. Each step interpolates from
seeded noise toward the prompt's content, which is fully formed two steps
before the end so the final two steps are static. Images encode the content
per patch through a sigmoid, so decoding an image recovers its content exactly.

A planted leak mixes the reference subject's prototype into the target at the
reference subject's region with weight ``g(alpha)``, where alpha is the mean
key scale the control applies over that region.
"""

import logging
import math
import re
import zlib
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.special import expit, logit

from src.exceptions import BackboneError, DimensionMismatchError, StepRangeError
from src.models.attention import AttentionTensors
from src.models.backbone import (
    AttentionControl,
    AttentionRecord,
    BackboneConfig,
    FeatureStack,
    GenerationResult,
    LatentPair,
    LatentTrajectory,
    PartialState,
)
from src.models.mock import MockSpec
from src.models.prompts import PromptSpec, subject_noun
from src.services.attention import reference_attention_mass, shared_attention_forward
from src.services.backbone.base import validate_layers, validate_stop_at
from src.utils.arrays import BoolArray, FloatArray, resample_nearest

logger = logging.getLogger(__name__)

INSIDE_BASE = 0.82
INSIDE_PEAK = 0.13
OUTSIDE_BASE = 0.002
OUTSIDE_RING = 0.02
CONSTANT_LEVEL = 0.05
HEAD_JITTER = 0.02
SUBJECT_CAP = 0.98
IMAGE_TEMPERATURE = 2.0
PIXEL_EPS = 1e-6
AUTO_BLOCK = 3

_WORD = re.compile(r"[a-z0-9]+")


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _seed_word(value: int) -> int:
    return value & 0xFFFFFFFF


@dataclass(frozen=True)
class _MockState:
    content: FloatArray
    style: FloatArray
    noise: FloatArray
    target: FloatArray


@dataclass(frozen=True)
class _LayerWeights:
    features: FloatArray  # d x d, orthogonal
    query_key: FloatArray  # d x d_head, shared by queries and keys
    value: FloatArray  # d x d_head
    output: FloatArray  # d_head x d


class MockBackbone:
    """In-memory backbone driven by a :class:`MockSpec`."""

    def __init__(
        self, spec: Optional[MockSpec] = None, config: Optional[BackboneConfig] = None
    ) -> None:
        """Build the mock.

        Args:
            spec: Mock definition; defaults to :class:`MockSpec` defaults
            config: Overrides ``spec.backbone``; its layers must exist in the spec

        Raises:
            UnknownLayerError: If ``config`` names layers the spec does not have
        """
        self.spec = spec or MockSpec()
        self.config = config or self.spec.backbone
        self.grid = self.config.latent_grid
        self.generation_calls = 0
        self.resumed_calls = 0
        self.simulation_calls = 0

        known = {layer_id: self.spec.backbone.latent_grid for layer_id in self.spec.backbone.bottleneck_layer_ids}
        known.update(self.spec.extra_layers)
        validate_layers(self.config, known)
        if self.config.latent_grid != self.spec.backbone.latent_grid:
            raise DimensionMismatchError("config grid differs from the mock spec grid")
        self._grids = dict(known)

        d = self.spec.feature_dim
        self._background = np.eye(d)[0]
        self._prototypes: dict[str, FloatArray] = {}
        self._regions: dict[str, BoolArray] = {}
        for position, subject in enumerate(self.spec.subjects, start=1):
            prototype = (
                np.asarray(subject.prototype, dtype=np.float64)
                if subject.prototype is not None
                else np.eye(d)[position]
            )
            self._prototypes[subject.noun] = prototype
            region = np.zeros(self.grid[0] * self.grid[1], dtype=bool)
            region[subject.region] = True
            self._regions[subject.noun] = region.reshape(self.grid)

        rng = np.random.default_rng(_seed_word(self.spec.seed))
        head = self.spec.head_dim
        self._weights: dict[str, _LayerWeights] = {}
        for layer_id in sorted(self._grids):
            orthogonal, _ = np.linalg.qr(rng.normal(size=(d, d)))
            self._weights[layer_id] = _LayerWeights(
                features=orthogonal,
                query_key=rng.normal(size=(d, head)) / math.sqrt(d),
                value=rng.normal(size=(d, head)) / math.sqrt(d),
                output=rng.normal(size=(head, d)) / math.sqrt(head),
            )
        self._profiles: dict[str, tuple[FloatArray, bool]] = {}

    # Geometry and subjects

    def tokenize(self, text: str) -> list[str]:
        return ["<bos>", *_WORD.findall(text.lower())]

    def layer_grids(self) -> Mapping[str, tuple[int, int]]:
        return dict(self._grids)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        scale = self.spec.image_scale
        return (self.grid[0] * scale, self.grid[1] * scale, 3)

    def _plant(self, noun: str) -> None:
        if not self.spec.auto_plant:
            raise BackboneError(f"mock spec declares no subject {noun!r}")
        height, width = self.grid
        block_h, block_w = min(AUTO_BLOCK, height), min(AUTO_BLOCK, width)
        digest = _crc(noun)
        top = digest % (height - block_h + 1)
        left = (digest // 7) % (width - block_w + 1)
        region = np.zeros(self.grid, dtype=bool)
        region[top : top + block_h, left : left + block_w] = True
        rng = np.random.default_rng(digest)
        prototype = np.zeros(self.spec.feature_dim)
        prototype[1:] = np.abs(rng.normal(size=self.spec.feature_dim - 1))
        self._regions[noun] = region
        self._prototypes[noun] = prototype / np.linalg.norm(prototype)
        logger.debug("Auto-planted %s at (%d, %d)", noun, top, left)

    def region(self, noun: str) -> BoolArray:
        """Planted region of a subject on the bottleneck grid."""
        key = subject_noun(noun).lower()
        if key not in self._regions:
            self._plant(key)
        return self._regions[key]

    def prototype(self, noun: str) -> FloatArray:
        """Prototype content vector of a subject."""
        key = subject_noun(noun).lower()
        if key not in self._prototypes:
            self._plant(key)
        return self._prototypes[key]

    # Images

    def decode_image(self, content: FloatArray) -> FloatArray:
        """Render patch content as an RGB image in [0, 1]."""
        height, width = self.grid
        scale = self.spec.image_scale
        slots = np.full((height, width, 3 * scale * scale), 0.5)
        slots[..., : self.spec.feature_dim] = expit(content / IMAGE_TEMPERATURE)
        return (
            slots.reshape(height, width, scale, scale, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(height * scale, width * scale, 3)
        )

    def content_from_image(self, image: FloatArray) -> FloatArray:
        """Invert :meth:`decode_image`.

        Raises:
            DimensionMismatchError: If the image does not have the mock geometry
        """
        if image.shape != self.image_shape:
            raise DimensionMismatchError(
                f"image shape {image.shape} does not match backbone geometry {self.image_shape}"
            )
        height, width = self.grid
        scale = self.spec.image_scale
        slots = (
            np.asarray(image, dtype=np.float64)
            .reshape(height, scale, width, scale, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(height, width, 3 * scale * scale)
        )
        pixels = np.clip(slots[..., : self.spec.feature_dim], PIXEL_EPS, 1.0 - PIXEL_EPS)
        return logit(pixels) * IMAGE_TEMPERATURE

    # Denoising

    def _beta(self, step: int) -> float:
        return min(1.0, step / max(self.config.total_steps - 2, 1))

    def _noise(self, prompt: PromptSpec, seed: int) -> FloatArray:
        rng = np.random.default_rng([_seed_word(seed), _crc(prompt.full_prompt)])
        shape = (*self.grid, self.spec.feature_dim)
        return rng.normal(size=shape) * self.spec.noise_scale

    def _target_content(
        self, prompt: PromptSpec, control: Optional[AttentionControl]
    ) -> FloatArray:
        content = np.zeros((*self.grid, self.spec.feature_dim))
        for subject in prompt.subjects:
            content[self.region(subject.noun)] += self.prototype(subject.noun)
        if control is not None:
            scale = control.scale_map(self.grid)
            targets = [subject.noun.lower() for subject in prompt.subjects]
            for source in control.reference.prompt.subjects:
                leak = self.spec.leak_for(source.noun, targets)
                region = self.region(source.noun)
                if leak is None or not region.any():
                    continue
                weight = leak.profile.weight(float(scale[region].mean()))
                content[region] = (1.0 - weight) * content[region] + weight * self.prototype(
                    source.noun
                )
        return content + self._background

    def _subject_profile(self, noun: str) -> tuple[FloatArray, bool]:
        key = subject_noun(noun).lower()
        if key in self._profiles:
            return self._profiles[key]
        region = self.region(key)
        if not region.any():
            profile = (np.full(region.size, CONSTANT_LEVEL), True)
        else:
            rows, cols = np.indices(self.grid)
            centre_row, centre_col = rows[region].mean(), cols[region].mean()
            sigma = max(1.0, math.sqrt(region.sum()) / 2.0)
            peak = np.exp(-((rows - centre_row) ** 2 + (cols - centre_col) ** 2) / (2 * sigma**2))
            distance = ndimage.distance_transform_edt(~region)
            values = np.where(
                region,
                INSIDE_BASE + INSIDE_PEAK * peak,
                OUTSIDE_BASE + OUTSIDE_RING * np.exp(-(distance**2) / 2.0),
            )
            profile = (values.reshape(-1), False)
        self._profiles[key] = profile
        return profile

    def _cross_attention(self, prompt: PromptSpec, seed: int, step: int) -> list[AttentionRecord]:
        token_count = len(self.tokenize(prompt.full_prompt))
        columns = [subject.token_index for subject in prompt.subjects]
        for column in columns:
            if column >= token_count:
                raise ValueError(f"token index {column} outside {token_count} tokens")
        others = [column for column in range(token_count) if column not in columns]
        profiles = [(subject.token_index, *self._subject_profile(subject.noun)) for subject in prompt.subjects]
        patches = self.grid[0] * self.grid[1]
        rng = np.random.default_rng(
            [_seed_word(self.spec.seed), _seed_word(seed), _crc(prompt.full_prompt), step]
        )
        records = []
        for layer_id in self.config.bottleneck_layer_ids:
            heads = []
            for _ in range(self.config.head_count):
                probs = np.zeros((patches, token_count))
                for column, values, constant in profiles:
                    jitter = 1.0 if constant else 1.0 + HEAD_JITTER * rng.uniform(-1.0, 1.0, patches)
                    probs[:, column] = values * jitter
                subject_total = probs.sum(axis=1)
                over = subject_total > SUBJECT_CAP
                probs[over] *= (SUBJECT_CAP / subject_total[over])[:, None]
                subject_total = probs.sum(axis=1)
                probs[:, others] = ((1.0 - subject_total) / len(others))[:, None]
                heads.append(probs)
            records.append(
                AttentionRecord(
                    layer_id=layer_id, step=step, grid=self.grid, probs=np.mean(heads, axis=0)
                )
            )
        return records

    def _layer_features(self, content: FloatArray) -> dict[str, FloatArray]:
        return {
            layer_id: resample_nearest(content, grid) @ self._weights[layer_id].features
            for layer_id, grid in self._grids.items()
        }

    def _self_attention(
        self,
        step: int,
        layer_id: str,
        tensors: AttentionTensors,
        control: Optional[AttentionControl],
        result: GenerationResult,
    ) -> FloatArray:
        head = self.spec.head_dim
        if control is None:
            return shared_attention_forward(tensors, AttentionTensors.empty(head, head))
        reference = control.reference.at(step, layer_id)
        scaled = bool(control.masks) and (
            control.scope == "all" or layer_id in self.config.bottleneck_layer_ids
        )
        if not scaled:
            return shared_attention_forward(tensors, reference)
        grid = self._grids[layer_id]
        union = control.union_mask(self.grid)
        output, probs = shared_attention_forward(
            tensors, reference, union, control.scale_map(self.grid), grid=grid, return_probs=True
        )
        result.reference_mass[(step, layer_id)] = reference_attention_mass(
            probs, resample_nearest(union, grid)
        )
        return output

    def _simulate(
        self,
        prompt: PromptSpec,
        seed: int,
        control: Optional[AttentionControl],
        first_step: int,
        last_step: int,
        state: Optional[_MockState],
        result: GenerationResult,
        capture_self_attention: bool,
        forced: Optional[Mapping[int, FloatArray]] = None,
    ) -> Optional[_MockState]:
        total = self.config.total_steps
        style_layers = list(self._grids)
        for step in range(first_step, last_step + 1):
            current = forced[step] if forced is not None else state.content  # type: ignore[union-attr]
            features = self._layer_features(current)
            result.features[step] = FeatureStack(
                step=step,
                layers={layer_id: features[layer_id] for layer_id in self.config.bottleneck_layer_ids},
            )
            result.records.extend(self._cross_attention(prompt, seed, step))

            signal = np.zeros((*self.grid, self.spec.feature_dim))
            for layer_id in style_layers:
                weights = self._weights[layer_id]
                flat = features[layer_id].reshape(-1, self.spec.feature_dim)
                keys = flat @ weights.query_key
                tensors = AttentionTensors(q=keys, k=keys, v=flat @ weights.value)
                if capture_self_attention:
                    result.self_attention[(step, layer_id)] = tensors
                output = self._self_attention(step, layer_id, tensors, control, result)
                grid = self._grids[layer_id]
                projected = (output @ weights.output).reshape(*grid, self.spec.feature_dim)
                signal += resample_nearest(projected, self.grid)
            signal /= len(style_layers)

            if state is not None:
                style = state.style + signal if step <= total - 2 else state.style
                beta = self._beta(step)
                state = _MockState(
                    content=(1.0 - beta) * state.noise + beta * state.target + self.spec.style_gain * style,
                    style=style,
                    noise=state.noise,
                    target=state.target,
                )
            result.completed_steps = step
        return state

    def run_generation(
        self,
        prompt: PromptSpec,
        control: Optional[AttentionControl] = None,
        stop_at: Optional[int] = None,
        *,
        seed: Optional[int] = None,
        capture_self_attention: bool = False,
        resume: Optional[PartialState] = None,
        trajectory: Optional[LatentTrajectory] = None,
    ) -> GenerationResult:
        """Run (or continue) a generation.

        Args:
            prompt: Prompt to generate
            control: Shared-attention control; ``None`` is plain generation
            stop_at: Last step to run; the image is only decoded at step T
            seed: Noise seed; defaults to the backbone seed
            capture_self_attention: Record tensors for later replay
            resume: Partial state to continue; its prompt, control and seed win
            trajectory: Inverted trajectory to replay instead of denoising

        Returns:
            GenerationResult with captures for the steps that ran

        Raises:
            StepRangeError: If ``stop_at`` is outside ``[2, T]`` or not after ``resume``
        """
        total = self.config.total_steps
        last_step = validate_stop_at(self.config, stop_at)
        if resume is not None:
            if last_step <= resume.step:
                raise StepRangeError(f"cannot resume at step {resume.step} and stop at {last_step}")
            prompt, control, seed = resume.prompt, resume.control, resume.seed
            state: Optional[_MockState] = resume.state
            first_step = resume.step + 1
            self.resumed_calls += 1
        else:
            seed = self.config.seed if seed is None else seed
            first_step = 1
            self.generation_calls += 1
            if trajectory is None:
                noise = self._noise(prompt, seed)
                state = _MockState(
                    content=noise,
                    style=np.zeros_like(noise),
                    noise=noise,
                    target=self._target_content(prompt, control),
                )
            else:
                if trajectory.total_steps != total:
                    raise StepRangeError(
                        f"trajectory has {trajectory.total_steps} steps, backbone runs {total}"
                    )
                state = None

        result = GenerationResult(
            prompt=prompt,
            completed_steps=first_step - 1,
            image=None,
            provenance="inverted" if trajectory is not None else "generated",
        )
        forced = (
            {step: trajectory.states[step - 1] for step in range(1, total + 1)}
            if trajectory is not None
            else None
        )
        state = self._simulate(
            prompt, seed, control, first_step, last_step, state, result, capture_self_attention, forced
        )
        if control is not None and control.masks:
            result.scaled_layers = tuple(
                layer_id
                for layer_id in self._grids
                if control.scope == "all" or layer_id in self.config.bottleneck_layer_ids
            )
            logger.debug("Scaled reference keys at layers %s", ", ".join(result.scaled_layers))

        if last_step == total:
            final = trajectory.states[total] if trajectory is not None else state.content  # type: ignore[union-attr]
            result.image = self.decode_image(final)
        elif state is not None:
            result.partial = PartialState(
                prompt=prompt, control=control, seed=seed, step=last_step, state=state
            )
        return result

    # Inversion

    def ddim_invert(self, image: FloatArray, prompt: PromptSpec) -> LatentPair:
        """Exact on the mock: the final two steps are static."""
        content = self.content_from_image(image)
        return LatentPair(
            z_prev=content,
            z_last=content.copy(),
            provenance="inverted",
            final_step=self.config.total_steps,
        )

    def invert_trajectory(
        self, image: FloatArray, prompt: PromptSpec, seed: Optional[int] = None
    ) -> LatentTrajectory:
        content = self.content_from_image(image)
        noise = self._noise(prompt, self.config.seed if seed is None else seed)
        states = tuple(
            (1.0 - self._beta(step)) * noise + self._beta(step) * content if step else noise
            for step in range(self.config.total_steps + 1)
        )
        return LatentTrajectory(states=states, provenance="inverted")

    def resimulate(self, latents: LatentPair, prompt: PromptSpec) -> GenerationResult:
        """Re-run the final two steps from inverted latents with capture."""
        total = self.config.total_steps
        expected = (*self.grid, self.spec.feature_dim)
        if latents.z_prev.shape != expected:
            raise DimensionMismatchError(f"latents {latents.z_prev.shape} != {expected}")
        self.simulation_calls += 1
        result = GenerationResult(
            prompt=prompt, completed_steps=total - 2, image=None, provenance=latents.provenance
        )
        self._simulate(
            prompt,
            self.config.seed,
            None,
            total - 1,
            total,
            None,
            result,
            False,
            {total - 1: latents.z_prev, total: latents.z_last},
        )
        result.image = self.decode_image(latents.z_last)
        return result
