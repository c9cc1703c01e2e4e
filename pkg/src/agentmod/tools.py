"""OCR, captioning and object-detection tools.

Backends are either remote HTTP services or local fixture maps keyed by
image digest. Outputs are normalized into :class:`OcrText`,
:class:`Caption` or :class:`Detections`, cached on disk per
``(digest, tool, backend)`` and rendered into a stable text block for
prompts.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Union

import httpx

logger = logging.getLogger(__name__)

DEFAULT_MIN_CONFIDENCE = 0.3


class ToolKind(str, enum.Enum):
    OCR = "ocr"
    CAPTIONER = "captioner"
    DETECTOR = "detector"

    def __str__(self):
        return self.value


TOOL_ORDER = (ToolKind.OCR, ToolKind.CAPTIONER, ToolKind.DETECTOR)

TOOL_DESCRIPTIONS = {
    ToolKind.OCR: "extracts text from the image so written content can be read and reasoned about",
    ToolKind.CAPTIONER: "generates a high-level textual summary of the image, giving essential visual context",
    ToolKind.DETECTOR: "identifies and locates specific objects in the image, useful for spotting potentially harmful objects",
}


def sort_kinds(kinds: Iterable[ToolKind | str]) -> tuple[ToolKind, ...]:
    wanted = {ToolKind(k) for k in kinds}
    return tuple(k for k in TOOL_ORDER if k in wanted)


class ToolError(RuntimeError):
    retryable = False


class ToolUnavailable(ToolError):
    retryable = True


class ToolTimeout(ToolError):
    retryable = True


class MalformedToolOutput(ToolError):
    pass


@dataclass(frozen=True)
class OcrText:
    text: str
    kind = ToolKind.OCR

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text}


@dataclass(frozen=True)
class Caption:
    text: str
    kind = ToolKind.CAPTIONER

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text}


@dataclass(frozen=True)
class Detection:
    label: str
    confidence: float
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise MalformedToolOutput(f"degenerate bbox {self.bbox!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise MalformedToolOutput(f"confidence {self.confidence!r} outside [0, 1]")


@dataclass(frozen=True)
class Detections:
    items: tuple[Detection, ...] = ()
    kind = ToolKind.DETECTOR

    def to_dict(self) -> dict[str, Any]:
        return {
            "items": [
                {"label": d.label, "confidence": d.confidence, "bbox": list(d.bbox)} for d in self.items
            ]
        }


ToolOutput = Union[OcrText, Caption, Detections]


def image_digest(image: bytes) -> str:
    return hashlib.sha256(image).hexdigest()


def normalize_output(kind: ToolKind, payload: Any, min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> ToolOutput:
    """Turn a raw backend payload into the ToolOutput variant for ``kind``."""
    kind = ToolKind(kind)
    if not isinstance(payload, Mapping):
        raise MalformedToolOutput(f"{kind}: payload must be an object, got {type(payload).__name__}")
    tag = payload.get("type")
    if tag is not None and tag != kind.value:
        raise MalformedToolOutput(f"{kind}: payload tagged {tag!r}")
    if kind in (ToolKind.OCR, ToolKind.CAPTIONER):
        text = payload.get("text")
        if not isinstance(text, str):
            raise MalformedToolOutput(f"{kind}: missing text field")
        if kind is ToolKind.OCR:
            return OcrText(" ".join(text.split()))
        return Caption(text.strip())

    items = payload.get("items")
    if not isinstance(items, list):
        raise MalformedToolOutput("detector: missing items list")
    kept = []
    for raw in items:
        try:
            bbox = tuple(float(v) for v in raw["bbox"])
            det = Detection(str(raw["label"]), float(raw["confidence"]), bbox)  # type: ignore[arg-type]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedToolOutput(f"detector: bad item {raw!r}") from exc
        if det.confidence >= min_confidence:
            kept.append(det)
    # sorted() is stable, so ties keep backend order
    kept = sorted(kept, key=lambda d: -d.confidence)
    return Detections(tuple(kept))


def output_from_dict(kind: ToolKind, data: Mapping[str, Any]) -> ToolOutput:
    return normalize_output(kind, data, min_confidence=0.0)


class ToolBackend(Protocol):
    name: str

    def call(self, kind: ToolKind, image: bytes) -> Any: ...


class FixtureToolBackend:
    """Serves tool outputs from a ``digest -> {tool: output}`` mapping."""

    def __init__(self, table: Mapping[str, Mapping[str, Any]], name: str = "fixture"):
        self.table = dict(table)
        self.name = name
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> FixtureToolBackend:
        path = Path(path)
        with path.open(encoding="utf-8") as f:
            table = json.load(f)
        return cls(table, name=f"fixture:{path.name}")

    def call(self, kind: ToolKind, image: bytes) -> Any:
        with self._lock:
            self.calls += 1
        digest = image_digest(image)
        try:
            return self.table[digest][ToolKind(kind).value]
        except KeyError:
            raise ToolUnavailable(f"fixture has no {kind} output for image {digest[:12]}") from None


class HttpToolBackend:
    """Client for a tool service speaking ``POST {tool, image_b64} -> {ok, output}``."""

    def __init__(
        self,
        url: str,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.name = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.client = client or httpx.Client()
        self.calls = 0

    def _post_once(self, kind: ToolKind, image: bytes) -> Any:
        body = {"tool": ToolKind(kind).value, "image_b64": base64.b64encode(image).decode("ascii")}
        self.calls += 1
        try:
            resp = self.client.post(self.url, json=body, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise ToolTimeout(f"{kind}: timed out after {self.timeout}s") from exc
        except httpx.TransportError as exc:
            raise ToolUnavailable(f"{kind}: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise ToolUnavailable(f"{kind}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise MalformedToolOutput(f"{kind}: HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise MalformedToolOutput(f"{kind}: response is not JSON") from exc
        if not isinstance(data, dict) or not data.get("ok") or "output" not in data:
            raise MalformedToolOutput(f"{kind}: backend reported failure: {data!r:.200}")
        return data["output"]

    def call(self, kind: ToolKind, image: bytes) -> Any:
        for attempt in range(self.retries + 1):
            try:
                return self._post_once(kind, image)
            except ToolError as exc:
                if not exc.retryable or attempt == self.retries:
                    raise
                time.sleep(self.backoff * 2**attempt)
        raise AssertionError("unreachable")


class ToolRegistry:
    def __init__(self, backends: Mapping[ToolKind | str, ToolBackend] | None = None):
        self._backends: dict[ToolKind, ToolBackend] = {}
        for kind, backend in (backends or {}).items():
            self.register(kind, backend)

    @classmethod
    def single(cls, backend: ToolBackend) -> ToolRegistry:
        return cls({k: backend for k in TOOL_ORDER})

    def register(self, kind: ToolKind | str, backend: ToolBackend) -> None:
        self._backends[ToolKind(kind)] = backend

    def get(self, kind: ToolKind | str) -> ToolBackend:
        try:
            return self._backends[ToolKind(kind)]
        except KeyError:
            raise ToolUnavailable(f"no backend registered for {kind}") from None


class ToolCache:
    """Raw tool payloads cached per (digest, tool, backend).

    With a directory, entries live at ``<dir>/<digest>/<tool>.json`` and are
    written atomically; without one the cache is in-memory only.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[tuple[str, str, str], Any] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _file(self, digest: str, kind: ToolKind) -> Path:
        assert self.directory is not None
        return self.directory / digest / f"{kind.value}.json"

    def get(self, digest: str, kind: ToolKind, backend: str) -> Any | None:
        key = (digest, kind.value, backend)
        with self._lock:
            if key in self._mem:
                self.hits += 1
                return self._mem[key]
        if self.directory is not None:
            path = self._file(digest, kind)
            try:
                with path.open(encoding="utf-8") as f:
                    entry = json.load(f)
            except (OSError, ValueError):
                entry = None
            if entry is not None and entry.get("backend") == backend:
                with self._lock:
                    self._mem[key] = entry["output"]
                    self.hits += 1
                return entry["output"]
        with self._lock:
            self.misses += 1
        return None

    def put(self, digest: str, kind: ToolKind, backend: str, payload: Any) -> None:
        with self._lock:
            self._mem[(digest, kind.value, backend)] = payload
        if self.directory is None:
            return
        path = self._file(digest, kind)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{kind.value}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump({"backend": backend, "output": payload}, f, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


def invoke_tool(
    kind: ToolKind | str,
    image: bytes,
    backend: ToolBackend,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
) -> ToolOutput:
    if not image:
        raise ValueError("image is empty")
    kind = ToolKind(kind)
    return normalize_output(kind, backend.call(kind, image), min_confidence)


@dataclass
class ToolBundle:
    image_digest: str
    outputs: dict[ToolKind, ToolOutput] = field(default_factory=dict)
    errors: dict[ToolKind, str] = field(default_factory=dict)

    def __post_init__(self):
        for kind, out in self.outputs.items():
            if out.kind is not ToolKind(kind):
                raise ValueError(f"output for {kind} has variant {out.kind}")

    def kinds(self) -> tuple[ToolKind, ...]:
        return sort_kinds(self.outputs)

    def subset(self, kinds: Iterable[ToolKind | str]) -> ToolBundle:
        wanted = set(sort_kinds(kinds))
        return ToolBundle(self.image_digest, {k: v for k, v in self.outputs.items() if k in wanted})

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_digest": self.image_digest,
            "outputs": {k.value: self.outputs[k].to_dict() for k in self.kinds()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ToolBundle:
        outputs = {ToolKind(k): output_from_dict(ToolKind(k), v) for k, v in data.get("outputs", {}).items()}
        return cls(data["image_digest"], outputs)


def gather_tools(
    image: bytes,
    kinds: Iterable[ToolKind | str],
    registry: ToolRegistry,
    cache: ToolCache | None = None,
    policy: str = "strict",
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
) -> ToolBundle:
    """Collect the requested tool outputs for one image.

    Under ``policy="strict"`` the first tool failure propagates; under
    ``"best-effort"`` failed tools are left out of the bundle and noted in
    ``bundle.errors``.
    """
    if policy not in ("strict", "best-effort"):
        raise ValueError(f"unknown tool policy {policy!r}")
    wanted = sort_kinds(kinds)
    if not wanted:
        raise ValueError("at least one tool kind is required")
    if not image:
        raise ValueError("image is empty")
    digest = image_digest(image)
    bundle = ToolBundle(digest)
    for kind in wanted:
        try:
            backend = registry.get(kind)
            payload = cache.get(digest, kind, backend.name) if cache is not None else None
            if payload is None:
                payload = backend.call(kind, image)
                output = normalize_output(kind, payload, min_confidence)
                if cache is not None:
                    cache.put(digest, kind, backend.name, payload)
            else:
                output = normalize_output(kind, payload, min_confidence)
        except ToolError as exc:
            if policy == "strict":
                raise
            logger.warning("tool %s failed for %s: %s", kind, digest[:12], exc)
            bundle.errors[kind] = str(exc)
            continue
        bundle.outputs[kind] = output
    return bundle


def _render_one(output: ToolOutput) -> str:
    if isinstance(output, OcrText):
        return f"OCR: {output.text}" if output.text else "OCR: (no text found)"
    if isinstance(output, Caption):
        return f"Caption: {output.text}"
    if not output.items:
        return "Detections: (no objects detected)"
    lines = ["Detections:"]
    for d in output.items:
        box = ", ".join(str(int(round(v))) for v in d.bbox)
        lines.append(f"- {d.label} ({d.confidence:.2f}) [{box}]")
    return "\n".join(lines)


def render_tool_output(output: ToolOutput) -> str:
    return _render_one(output)


def render_tool_info(bundle: ToolBundle) -> str:
    """Render the bundle as OCR, Caption, Detections sections; absent tools are omitted."""
    return "\n".join(_render_one(bundle.outputs[k]) for k in bundle.kinds())
