"""Stable Diffusion backbone built on diffusers.

Requires the packages in ``requirements-diffusion.txt``. Layer ids are the
attention module paths without the ``.attn1`` suffix, e.g.
``mid_block.attentions.0.transformer_blocks.0``.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

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
from src.models.prompts import PromptSpec
from src.services.attention import moment_rows
from src.services.backbone.base import validate_layers, validate_stop_at
from src.utils.arrays import FloatArray, resample_nearest

logger = logging.getLogger(__name__)

VAE_SCALE = 0.18215
ADAIN_EPS = 1e-5
DEFAULT_MODEL = "runwayml/stable-diffusion-v1-5"
START_TOKEN = "<|startoftext|>"


def _import_stack() -> tuple[Any, Any]:
    try:
        import diffusers
        import torch
    except ImportError as exc:
        raise BackboneError(
            "the diffusers backbone needs torch and diffusers; "
            "install requirements-diffusion.txt"
        ) from exc
    return torch, diffusers


def layer_grid(layer_id: str, latent_size: int) -> tuple[int, int]:
    """Patch grid of a UNet attention layer for a square latent."""
    parts = layer_id.split(".")
    if parts[0] == "mid_block":
        side = latent_size >> 3
    elif parts[0] == "down_blocks":
        side = latent_size >> int(parts[1])
    elif parts[0] == "up_blocks":
        side = latent_size >> (3 - int(parts[1]))
    else:
        raise BackboneError(f"cannot place layer {layer_id!r} in the UNet")
    return side, side


@dataclass
class _Session:
    """Mutable state the attention processors read and write during one pass."""

    step: int = 0
    bottleneck: frozenset[str] = frozenset()
    feature_steps: frozenset[int] = frozenset()
    grids: dict[str, tuple[int, int]] = field(default_factory=dict)
    latent_grid: tuple[int, int] = (8, 8)
    capture: bool = False
    capture_self: bool = False
    control: Optional[AttentionControl] = None
    result: Optional[GenerationResult] = None


class CaptureProcessor:
    """Attention processor for capture and shared self-attention.

    Cross-attention of the conditional branch is head-averaged into
    :class:`AttentionRecord` entries at bottleneck layers. Self-attention inputs
    become the feature stack at the localization step and the final step only.
    Reference tensors are recorded when requested, with queries reduced to
    their moment rows, and a control replays them with scaled subject keys.
    """

    def __init__(self, layer_id: str, session: _Session, torch: Any) -> None:
        self.layer_id = layer_id
        self.session = session
        self.torch = torch

    def _heads(self, attn: Any, tensor: Any) -> Any:
        batch, length, width = tensor.shape
        return tensor.view(batch, length, attn.heads, width // attn.heads).transpose(1, 2)

    def _adain(self, x: Any, y: Any) -> Any:
        mu_x = x.mean(dim=-2, keepdim=True)
        sigma_x = x.std(dim=-2, keepdim=True, unbiased=False).clamp_min(ADAIN_EPS)
        mu_y = y.mean(dim=-2, keepdim=True)
        sigma_y = y.std(dim=-2, keepdim=True, unbiased=False)
        return sigma_y * (x - mu_x) / sigma_x + mu_y

    def _record_cross(self, attn: Any, query: Any, key: Any) -> None:
        session = self.session
        scale = 1.0 / math.sqrt(query.shape[-1] // attn.heads)
        q = self._heads(attn, query[-1:])
        k = self._heads(attn, key[-1:])
        probs = (q @ k.transpose(-1, -2) * scale).softmax(dim=-1).mean(dim=1)[0]
        probs = probs.float().cpu().numpy().astype(np.float64)
        probs /= probs.sum(axis=1, keepdims=True)
        assert session.result is not None
        session.result.records.append(
            AttentionRecord(
                layer_id=self.layer_id,
                step=session.step,
                grid=session.grids[self.layer_id],
                probs=probs,
            )
        )

    def _shared(self, attn: Any, query: Any, key: Any, value: Any) -> Any:
        torch = self.torch
        session = self.session
        control = session.control
        assert control is not None
        reference = control.reference.at(session.step, self.layer_id)

        def as_tensor(array: np.ndarray) -> Any:
            return torch.as_tensor(array, device=query.device, dtype=query.dtype)

        ref_q = self._heads(attn, as_tensor(reference.q)[None])
        ref_k = self._heads(attn, as_tensor(reference.k)[None])
        ref_v = self._heads(attn, as_tensor(reference.v)[None])
        q = self._heads(attn, query)
        k = self._heads(attn, key)
        v = self._heads(attn, value)
        q = self._adain(q, ref_q)
        k = self._adain(k, ref_k)
        if control.masks and (control.scope == "all" or self.layer_id in session.bottleneck):
            scale = resample_nearest(
                control.scale_map(session.latent_grid), session.grids[self.layer_id]
            ).reshape(-1)
            ref_k = ref_k * as_tensor(scale)[None, None, :, None]
        batch = q.shape[0]
        keys = torch.cat([ref_k.expand(batch, -1, -1, -1), k], dim=2)
        values = torch.cat([ref_v.expand(batch, -1, -1, -1), v], dim=2)
        out = torch.nn.functional.scaled_dot_product_attention(q, keys, values)
        return out.transpose(1, 2).reshape(batch, -1, attn.heads * q.shape[-1])

    def __call__(
        self,
        attn: Any,
        hidden_states: Any,
        encoder_hidden_states: Optional[Any] = None,
        attention_mask: Optional[Any] = None,
        temb: Optional[Any] = None,
        **kwargs: Any,
    ) -> Any:
        session = self.session
        is_cross = encoder_hidden_states is not None
        residual = hidden_states
        context = encoder_hidden_states if is_cross else hidden_states
        if is_cross and attn.norm_cross:
            context = attn.norm_encoder_hidden_states(context)
        query = attn.to_q(hidden_states)
        key = attn.to_k(context)
        value = attn.to_v(context)

        if is_cross:
            if session.capture and self.layer_id in session.bottleneck:
                self._record_cross(attn, query, key)
            heads_q, heads_k, heads_v = (self._heads(attn, t) for t in (query, key, value))
            out = self.torch.nn.functional.scaled_dot_product_attention(heads_q, heads_k, heads_v)
            out = out.transpose(1, 2).reshape(query.shape[0], -1, query.shape[-1])
        else:
            if (
                session.capture
                and self.layer_id in session.bottleneck
                and session.step in session.feature_steps
                and session.result is not None
            ):
                height, width = session.grids[self.layer_id]
                features = hidden_states[-1].float().cpu().numpy().astype(np.float64)
                stack = session.result.features.setdefault(
                    session.step, FeatureStack(step=session.step, layers={})
                )
                stack.layers[self.layer_id] = features.reshape(height, width, -1)  # type: ignore[index]
            if session.capture_self and session.result is not None:
                # queries are only read as AdaIN statistics; keys and values keep the model dtype
                session.result.self_attention[(session.step, self.layer_id)] = AttentionTensors(
                    q=moment_rows(query[-1].float().cpu().numpy()),
                    k=key[-1].cpu().numpy(),
                    v=value[-1].cpu().numpy(),
                )
            if session.control is not None:
                out = self._shared(attn, query, key, value)
            else:
                heads_q, heads_k, heads_v = (self._heads(attn, t) for t in (query, key, value))
                out = self.torch.nn.functional.scaled_dot_product_attention(heads_q, heads_k, heads_v)
                out = out.transpose(1, 2).reshape(query.shape[0], -1, query.shape[-1])

        out = attn.to_out[1](attn.to_out[0](out))
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class DiffusersBackbone:
    """Stable Diffusion with a DDIM scheduler behind the backbone contract."""

    def __init__(
        self,
        config: Optional[BackboneConfig] = None,
        model_id: str = DEFAULT_MODEL,
        device: str = "cuda",
        dtype: str = "float16",
        guidance_scale: float = 7.5,
        image_size: int = 512,
    ) -> None:
        """Load the pipeline and install capture processors.

        Raises:
            BackboneError: If torch or diffusers is unavailable or loading fails
            UnknownLayerError: If a configured bottleneck layer does not exist
        """
        torch, diffusers = _import_stack()
        self.torch = torch
        self.guidance_scale = guidance_scale
        self.image_size = image_size
        self.generation_calls = 0
        try:
            self.pipe = diffusers.StableDiffusionPipeline.from_pretrained(
                model_id, torch_dtype=getattr(torch, dtype), safety_checker=None
            )
        except Exception as exc:  # network, cache and weight format errors
            raise BackboneError(f"cannot load {model_id}: {exc}") from exc
        self.pipe.scheduler = diffusers.DDIMScheduler.from_config(self.pipe.scheduler.config)
        self.pipe.to(device)
        self.device = device

        latent_size = image_size // 8
        self._grids = {
            name.removesuffix(".attn1.processor"): layer_grid(name, latent_size)
            for name in self.pipe.unet.attn_processors
            if name.endswith(".attn1.processor")
        }
        mid_layers = tuple(layer for layer in self._grids if layer.startswith("mid_block"))
        self.config = config or BackboneConfig(
            total_steps=50,
            bottleneck_layer_ids=mid_layers,
            latent_grid=self._grids[mid_layers[0]],
        )
        validate_layers(self.config, self._grids)
        self.session = _Session(
            bottleneck=frozenset(self.config.bottleneck_layer_ids),
            feature_steps=frozenset({self.config.localization_step, self.config.total_steps}),
            grids=self._grids,
            latent_grid=self.config.latent_grid,
        )
        self.pipe.unet.set_attn_processor(
            {
                name: CaptureProcessor(name.rsplit(".", 2)[0], self.session, torch)
                for name in self.pipe.unet.attn_processors
            }
        )
        self.pipe.scheduler.set_timesteps(self.config.total_steps)
        logger.info("Loaded %s with %d shared attention layers", model_id, len(self._grids))

    def tokenize(self, text: str) -> list[str]:
        return [START_TOKEN, *self.pipe.tokenizer.tokenize(text.lower())]

    def layer_grids(self) -> Mapping[str, tuple[int, int]]:
        return dict(self._grids)

    def _embeddings(self, prompt: PromptSpec) -> Any:
        conditional, unconditional = self.pipe.encode_prompt(
            prompt.full_prompt, self.device, 1, True
        )
        return self.torch.cat([unconditional, conditional])

    def _noise(self, seed: int) -> Any:
        generator = self.torch.Generator(device="cpu").manual_seed(seed)
        shape = (1, self.pipe.unet.config.in_channels, self.image_size // 8, self.image_size // 8)
        return self.torch.randn(shape, generator=generator).to(self.device, self.pipe.unet.dtype)

    def _predict(self, latents: Any, step: int, embeddings: Any) -> Any:
        timestep = self.pipe.scheduler.timesteps[step - 1]
        model_input = self.pipe.scheduler.scale_model_input(self.torch.cat([latents] * 2), timestep)
        noise = self.pipe.unet(model_input, timestep, encoder_hidden_states=embeddings).sample
        unconditional, conditional = noise.chunk(2)
        return unconditional + self.guidance_scale * (conditional - unconditional)

    def _denoise(
        self,
        latents: Optional[Any],
        first: int,
        last: int,
        embeddings: Any,
        forced: Optional[Mapping[int, Any]] = None,
    ) -> Any:
        with self.torch.no_grad():
            for step in range(first, last + 1):
                if forced is not None and step in forced:
                    latents = forced[step]
                self.session.step = step
                noise = self._predict(latents, step, embeddings)
                timestep = self.pipe.scheduler.timesteps[step - 1]
                latents = self.pipe.scheduler.step(noise, timestep, latents).prev_sample
                assert self.session.result is not None
                self.session.result.completed_steps = step
        return latents

    def _decode(self, latents: Any) -> FloatArray:
        with self.torch.no_grad():
            image = self.pipe.vae.decode(latents / VAE_SCALE).sample
        image = (image / 2 + 0.5).clamp(0, 1)[0].permute(1, 2, 0)
        return image.float().cpu().numpy().astype(np.float64)

    def _encode(self, image: FloatArray) -> Any:
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionMismatchError(f"expected an RGB image, got {image.shape}")
        tensor = self.torch.as_tensor(image.transpose(2, 0, 1)[None] * 2.0 - 1.0)
        tensor = tensor.to(self.device, self.pipe.vae.dtype)
        tensor = self.torch.nn.functional.interpolate(tensor, size=(self.image_size, self.image_size))
        with self.torch.no_grad():
            return self.pipe.vae.encode(tensor).latent_dist.mean * VAE_SCALE

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
        total = self.config.total_steps
        last = validate_stop_at(self.config, stop_at)
        if resume is not None:
            if last <= resume.step:
                raise StepRangeError(f"cannot resume at step {resume.step} and stop at {last}")
            prompt, control, seed = resume.prompt, resume.control, resume.seed
            latents, first = resume.state, resume.step + 1
        else:
            seed = self.config.seed if seed is None else seed
            latents, first = self._noise(seed), 1
            self.generation_calls += 1
        forced = None
        if trajectory is not None:
            if trajectory.total_steps != total:
                raise StepRangeError(f"trajectory has {trajectory.total_steps} steps, backbone runs {total}")
            forced = {step: trajectory.states[step - 1] for step in range(1, total + 1)}

        result = GenerationResult(
            prompt=prompt,
            completed_steps=first - 1,
            image=None,
            provenance="inverted" if trajectory is not None else "generated",
        )
        self.session.result = result
        self.session.capture = True
        self.session.capture_self = capture_self_attention
        self.session.control = control
        try:
            latents = self._denoise(latents, first, last, self._embeddings(prompt), forced)
        finally:
            self.session.control = None
            self.session.capture = False
            self.session.result = None
        if control is not None and control.masks:
            result.scaled_layers = tuple(
                layer
                for layer in self._grids
                if control.scope == "all" or layer in self.config.bottleneck_layer_ids
            )
        if last == total:
            final = trajectory.states[total] if trajectory is not None else latents
            result.image = self._decode(final)
        else:
            result.partial = PartialState(prompt=prompt, control=control, seed=seed, step=last, state=latents)
        return result

    def _invert(self, image: FloatArray, prompt: PromptSpec, depth: int) -> list[Any]:
        """Latents from the clean image up through ``depth`` inversion steps."""
        scheduler = self.pipe.scheduler
        embeddings = self._embeddings(prompt)
        latents = self._encode(image)
        path = [latents]
        timesteps = list(reversed(scheduler.timesteps))
        with self.torch.no_grad():
            for index in range(depth):
                timestep = timesteps[index]
                previous = timesteps[index - 1] if index else None
                alpha = (
                    scheduler.alphas_cumprod[previous]
                    if previous is not None
                    else scheduler.final_alpha_cumprod
                )
                alpha_next = scheduler.alphas_cumprod[timestep]
                self.session.step = self.config.total_steps - index
                noise = self._predict(latents, self.config.total_steps - index, embeddings)
                latents = (latents - (1 - alpha).sqrt() * noise) * (
                    alpha_next.sqrt() / alpha.sqrt()
                ) + (1 - alpha_next).sqrt() * noise
                path.append(latents)
        return path

    def ddim_invert(self, image: FloatArray, prompt: PromptSpec) -> LatentPair:
        path = self._invert(image, prompt, 2)
        return LatentPair(
            z_prev=path[2],
            z_last=path[1],
            provenance="inverted",
            final_step=self.config.total_steps,
        )

    def invert_trajectory(
        self, image: FloatArray, prompt: PromptSpec, seed: Optional[int] = None
    ) -> LatentTrajectory:
        path = self._invert(image, prompt, self.config.total_steps)
        return LatentTrajectory(states=tuple(reversed(path)), provenance="inverted")

    def resimulate(self, latents: LatentPair, prompt: PromptSpec) -> GenerationResult:
        total = self.config.total_steps
        result = GenerationResult(
            prompt=prompt, completed_steps=total - 2, image=None, provenance=latents.provenance
        )
        self.session.result = result
        self.session.capture = True
        try:
            final = self._denoise(
                None,
                total - 1,
                total,
                self._embeddings(prompt),
                {total - 1: latents.z_prev, total: latents.z_last},
            )
        finally:
            self.session.capture = False
            self.session.result = None
        result.image = self._decode(final)
        return result
