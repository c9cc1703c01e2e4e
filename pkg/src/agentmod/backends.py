"""Chat-completion backends for teacher and student models.

All backends expose ``complete(messages, params) -> str`` and carry their
own retry budget; :func:`chat_complete` applies the retries.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from .dataset import ImageStore
from .protocol import ChatMessage, conversation_to_json

logger = logging.getLogger(__name__)

AUTH_TOKEN_ENV = "AGENTMOD_API_KEY"


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.1
    top_p: float = 0.3
    max_new_tokens: int = 512
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def with_seed(self, seed: int | None) -> GenerationParams:
        return replace(self, seed=seed)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


INFERENCE_PARAMS = GenerationParams()
# teacher sampling: temperature and top_p of 1 for diversity
TEACHER_PARAMS = GenerationParams(temperature=1.0, top_p=1.0, max_new_tokens=1024)


class BackendError(RuntimeError):
    retryable = False


class BackendUnavailable(BackendError):
    retryable = True


def conversation_digest(messages: Sequence[ChatMessage]) -> str:
    blob = json.dumps(conversation_to_json(messages), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ChatBackend:
    name = "backend"
    retries = 0
    backoff = 0.0
    timeout = 60.0

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
        raise NotImplementedError


class FixtureChatBackend(ChatBackend):
    """Replies looked up by conversation digest.

    A key ``"<digest>#<seed>"`` takes precedence over the bare digest, so
    repeated samples of one prompt can be scripted individually.
    """

    def __init__(self, replies: Mapping[str, str], name: str = "fixture"):
        self.replies = dict(replies)
        self.name = name

    @classmethod
    def from_file(cls, path: str | Path) -> FixtureChatBackend:
        path = Path(path)
        with path.open(encoding="utf-8") as f:
            data = json.load(f)
        return cls(data.get("replies", data), name=f"fixture:{path.name}")

    def complete(self, messages, params):
        digest = conversation_digest(messages)
        if params.seed is not None and f"{digest}#{params.seed}" in self.replies:
            return self.replies[f"{digest}#{params.seed}"]
        try:
            return self.replies[digest]
        except KeyError:
            raise BackendError(f"no scripted reply for conversation {digest[:12]}") from None


class CallableBackend(ChatBackend):
    def __init__(self, fn: Callable[[Sequence[ChatMessage], GenerationParams], str], name: str = "callable"):
        self.fn = fn
        self.name = name

    def complete(self, messages, params):
        return self.fn(messages, params)


class TurnScriptBackend(ChatBackend):
    """Returns ``replies[i]`` where i counts assistant turns already in the conversation."""

    def __init__(self, replies: Sequence[str], name: str = "turn-script"):
        self.replies = list(replies)
        self.name = name
        self.calls = 0

    def complete(self, messages, params):
        self.calls += 1
        i = sum(1 for m in messages if m.role == "assistant")
        return self.replies[min(i, len(self.replies) - 1)]


class HttpChatBackend(ChatBackend):
    """OpenAI-style ``/chat/completions`` client.

    Tool results travel as user messages wrapped in ``<tool_response>`` since
    tool calls live in the text grammar rather than the API's function calling.
    """

    def __init__(
        self,
        url: str,
        model: str = "default",
        images: ImageStore | None = None,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        token: str | None = None,
        client: httpx.Client | None = None,
    ):
        if "/chat/completions" not in url:
            url = url.rstrip("/") + "/v1/chat/completions"
        self.url = url
        self.name = url
        self.model = model
        self.images = images
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.token = token if token is not None else os.environ.get(AUTH_TOKEN_ENV)
        self.client = client or httpx.Client()

    def _image_url(self, ref: str) -> str:
        if self.images is None:
            raise BackendError("HTTP backend needs an image store to send images")
        try:
            data = self.images.read(ref)
        except FileNotFoundError as exc:
            raise BackendError(str(exc)) from exc
        mime = "image/png" if data[:8] == b"\x89PNG\r\n\x1a\n" else "image/jpeg"
        return f"data:{mime};base64," + base64.b64encode(data).decode("ascii")

    def encode_messages(self, messages: Sequence[ChatMessage]) -> list[dict[str, Any]]:
        out = []
        for m in messages:
            if m.role == "tool":
                out.append({"role": "user", "content": f"<tool_response>{m.text}</tool_response>"})
                continue
            content = []
            for p in m.parts:
                if "image_ref" in p:
                    content.append({"type": "image_url", "image_url": {"url": self._image_url(p["image_ref"])}})
                else:
                    content.append({"type": "text", "text": p["text"]})
            out.append({"role": m.role, "content": content})
        return out

    def complete(self, messages, params):
        body: dict[str, Any] = {
            "model": self.model,
            "messages": self.encode_messages(messages),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_new_tokens,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            resp = self.client.post(self.url, json=body, headers=headers, timeout=self.timeout)
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"{self.url}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendUnavailable(f"{self.url}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"{self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{self.url}: malformed completion response") from exc
        if not isinstance(content, str):
            raise BackendError(f"{self.url}: completion content is not text")
        return content


def chat_complete(
    backend: ChatBackend,
    messages: Sequence[ChatMessage],
    params: GenerationParams = INFERENCE_PARAMS,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """One completion with exponential-backoff retries on transient failures."""
    if not messages:
        raise ValueError("messages must be non-empty")
    if backend.retries < 0:
        raise ValueError("retry budget must be >= 0")
    for attempt in range(backend.retries + 1):
        try:
            return backend.complete(messages, params)
        except BackendError as exc:
            if not exc.retryable or attempt == backend.retries:
                raise
            delay = backend.backoff * 2**attempt
            logger.info("%s: %s; retrying in %.2fs", backend.name, exc, delay)
            sleep(delay)
    raise AssertionError("unreachable")
