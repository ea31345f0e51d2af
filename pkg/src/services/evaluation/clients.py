"""Embedding and vision-chat clients used by the evaluation."""

import asyncio
import base64
import logging
import re
from collections.abc import Callable, Mapping
from pathlib import Path
from typing import Any, Optional, Protocol, Union

import aiofiles
import httpx
import numpy as np

from src.exceptions import ServiceRequestError
from src.models.prompts import subject_noun
from src.services.backbone.mock import MockBackbone
from src.utils.arrays import FloatArray
from src.utils.images import decode_image_bytes

logger = logging.getLogger(__name__)


class ImageTextEmbedder(Protocol):
    """Joint image-text embedding space (CLIP-like)."""

    async def embed_image(self, path: Path) -> FloatArray: ...

    async def embed_text(self, text: str) -> FloatArray: ...


class ImageEmbedder(Protocol):
    """Image-only embedding space (DINO-like)."""

    async def embed_image(self, path: Path) -> FloatArray: ...


class VisionChatClient(Protocol):
    """One image and one text in, text out."""

    async def ask(self, image: Path, text: str) -> str: ...


async def read_bytes(path: Path) -> bytes:
    async with aiofiles.open(path, "rb") as f:
        return await f.read()


class _HTTPService:
    """POST JSON with bounded retries."""

    def __init__(
        self,
        endpoint_url: str,
        api_key: str = "",
        timeout: float = 60.0,
        retries: int = 3,
        client: Optional[httpx.AsyncClient] = None,
    ) -> None:
        if not endpoint_url:
            raise ServiceRequestError("no endpoint configured")
        self.endpoint_url = endpoint_url.rstrip("/")
        self.retries = retries
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.AsyncClient(timeout=timeout, headers=headers)

    async def post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.endpoint_url}{path}"
        last_error = ""
        for attempt in range(1, self.retries + 1):
            try:
                response = await self.client.post(url, json=payload)
                response.raise_for_status()
                return dict(response.json())
            except (httpx.HTTPError, ValueError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("POST %s failed (attempt %d/%d): %s", url, attempt, self.retries, last_error)
                if attempt < self.retries:
                    await asyncio.sleep(0.5 * attempt)
        raise ServiceRequestError(f"{url} failed after {self.retries} attempts: {last_error}")

    async def aclose(self) -> None:
        await self.client.aclose()


class HTTPEmbedder(_HTTPService):
    """Embedding service client.

    Expects ``POST /embed/image`` with ``{"model", "image"}`` (base64 PNG) and
    ``POST /embed/text`` with ``{"model", "text"}``; both answer
    ``{"embedding": [...]}``.
    """

    def __init__(self, endpoint_url: str, model: str, **kwargs: Any) -> None:
        super().__init__(endpoint_url, **kwargs)
        self.model = model

    async def embed_image(self, path: Path) -> FloatArray:
        content = base64.b64encode(await read_bytes(path)).decode("ascii")
        body = await self.post("/embed/image", {"model": self.model, "image": content})
        return np.asarray(body["embedding"], dtype=np.float64)

    async def embed_text(self, text: str) -> FloatArray:
        body = await self.post("/embed/text", {"model": self.model, "text": text})
        return np.asarray(body["embedding"], dtype=np.float64)


class HTTPVisionChatClient(_HTTPService):
    """OpenAI-compatible ``/chat/completions`` client with one image per message."""

    def __init__(self, endpoint_url: str, model: str, **kwargs: Any) -> None:
        super().__init__(endpoint_url, **kwargs)
        self.model = model

    async def ask(self, image: Path, text: str) -> str:
        content = base64.b64encode(await read_bytes(image)).decode("ascii")
        body = await self.post(
            "/chat/completions",
            {
                "model": self.model,
                "temperature": 0,
                "messages": [
                    {
                        "role": "user",
                        "content": [
                            {"type": "text", "text": text},
                            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{content}"}},
                        ],
                    }
                ],
            },
        )
        try:
            return str(body["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceRequestError(f"malformed chat reply: {body}") from exc


class TableEmbedder:
    """Embeddings looked up by image file name and by text."""

    def __init__(
        self,
        images: Mapping[str, Any],
        texts: Optional[Mapping[str, Any]] = None,
    ) -> None:
        self.images = {name: np.asarray(vector, dtype=np.float64) for name, vector in images.items()}
        self.texts = {text: np.asarray(vector, dtype=np.float64) for text, vector in (texts or {}).items()}

    async def embed_image(self, path: Path) -> FloatArray:
        try:
            return self.images[Path(path).name]
        except KeyError as exc:
            raise ServiceRequestError(f"no embedding for image {Path(path).name}") from exc

    async def embed_text(self, text: str) -> FloatArray:
        try:
            return self.texts[text]
        except KeyError as exc:
            raise ServiceRequestError(f"no embedding for text {text!r}") from exc


class MockBackboneEmbedder:
    """Embeddings derived from mock backbone content.

    Images embed as their mean patch content, texts as the prototype of their
    subject noun, so image-text scores measure how much of a subject an image
    carries. With ``flatten`` images embed as the full content map instead.
    """

    def __init__(self, backbone: MockBackbone, flatten: bool = False) -> None:
        self.backbone = backbone
        self.flatten = flatten

    async def embed_image(self, path: Path) -> FloatArray:
        content = self.backbone.content_from_image(decode_image_bytes(await read_bytes(path)))
        if self.flatten:
            return content.reshape(-1)
        return content.reshape(-1, content.shape[-1]).mean(axis=0)

    async def embed_text(self, text: str) -> FloatArray:
        return self.backbone.prototype(subject_noun(text).lower())


Reply = Union[str, Callable[[Path, str], str]]


class CannedVisionChatClient:
    """Replies chosen by image file name and question text."""

    def __init__(self, replies: Optional[Mapping[tuple[str, str], Reply]] = None, default: Reply = "No") -> None:
        self.replies = dict(replies or {})
        self.default = default
        self.requests: list[tuple[str, str]] = []

    async def ask(self, image: Path, text: str) -> str:
        name = Path(image).name
        self.requests.append((name, text))
        reply = self.replies.get((name, text), self.default)
        return reply(Path(image), text) if callable(reply) else reply


_ASK_FEATURES = re.compile(r"Are there any (?P<subject>.+?) visual features in this .+? image\?", re.IGNORECASE)
_ASK_PRESENCE = re.compile(r"Is there any (?P<subject>.+?) in this image\?", re.IGNORECASE)


class MockBackboneVisionClient:
    """Answers presence questions from mock backbone content.

    A subject counts as present when the mean content of its planted region,
    minus the background, projects onto its prototype by more than
    ``threshold``.
    """

    def __init__(self, backbone: MockBackbone, threshold: float = 0.5) -> None:
        self.backbone = backbone
        self.threshold = threshold

    def presence(self, image: FloatArray, subject: str) -> float:
        content = self.backbone.content_from_image(image)
        region = self.backbone.region(subject)
        if not region.any():
            return 0.0
        prototype = self.backbone.prototype(subject)
        background = np.eye(content.shape[-1])[0]
        mean = content[region].mean(axis=0) - background
        return float(mean @ prototype / (np.linalg.norm(prototype) or 1.0))

    async def ask(self, image: Path, text: str) -> str:
        match = _ASK_FEATURES.search(text) or _ASK_PRESENCE.search(text)
        if match is None:
            return "I cannot tell."
        pixels = decode_image_bytes(await read_bytes(image))
        present = self.presence(pixels, match.group("subject")) > self.threshold
        return "Yes." if present else "No."
