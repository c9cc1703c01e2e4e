"""Moderation inference: enforced-tool and selective multi-turn runs.

Enforced mode gathers a fixed tool subset up front and asks once.
Selective mode lets the model request tools turn by turn; each tool runs
at most once per conversation and repeated requests are answered from the
conversation's bundle.
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ._http import HttpError, JsonServer
from .backends import (
    INFERENCE_PARAMS,
    BackendError,
    ChatBackend,
    GenerationParams,
    chat_complete,
)
from .dataset import PRESET_SPACES, DatasetManifest, ImageStore, LabelSpace, ManifestError, Sample
from .protocol import (
    ChatMessage,
    append_tool_turn,
    build_enforced_prompt,
    build_selective_prompt,
    conversation_from_json,
    conversation_to_json,
    parse_model_output,
    text_message,
    validate_format,
)
from .tools import (
    TOOL_ORDER,
    ToolBundle,
    ToolCache,
    ToolError,
    ToolKind,
    ToolRegistry,
    gather_tools,
    image_digest,
    sort_kinds,
)

logger = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
DEFAULT_MAX_TOOL_TURNS = 3


class Failure(str, enum.Enum):
    UNPARSEABLE_ANSWER = "UNPARSEABLE_ANSWER"
    FORMAT_INVALID = "FORMAT_INVALID"
    BACKEND_ERROR = "BACKEND_ERROR"
    TOOL_ERROR = "TOOL_ERROR"
    TOOL_LOOP_EXCEEDED = "TOOL_LOOP_EXCEEDED"
    MISSING_IMAGE = "MISSING_IMAGE"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class ModerationResult:
    sample_id: str
    predicted_label: str | None
    transcript: tuple[ChatMessage, ...] = ()
    tools_called: frozenset[ToolKind] = frozenset()
    turn_count: int = 0
    failure: Failure | None = None
    reasoning: str | None = None
    detail: str | None = None

    def __post_init__(self):
        if (self.predicted_label is None) == (self.failure is None):
            raise ValueError("exactly one of predicted_label and failure must be set")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "predicted_label": self.predicted_label,
            "failure": self.failure.value if self.failure else None,
            "detail": self.detail,
            "reasoning": self.reasoning,
            "tools_called": [k.value for k in sort_kinds(self.tools_called)],
            "turn_count": self.turn_count,
            "transcript": conversation_to_json(self.transcript),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModerationResult:
        return cls(
            sample_id=data["sample_id"],
            predicted_label=data.get("predicted_label"),
            transcript=tuple(conversation_from_json(data.get("transcript", []))),
            tools_called=frozenset(ToolKind(k) for k in data.get("tools_called", [])),
            turn_count=data.get("turn_count", 0),
            failure=Failure(data["failure"]) if data.get("failure") else None,
            reasoning=data.get("reasoning"),
            detail=data.get("detail"),
        )


@dataclass(frozen=True)
class Mode:
    kind: str
    tools: tuple[ToolKind, ...] = ()

    @classmethod
    def parse(cls, text: str) -> Mode:
        """``selective``, ``enforced:all``, ``enforced:none`` or ``enforced:ocr+captioner``."""
        if text == "selective":
            return cls("selective")
        head, _, spec = text.partition(":")
        if head != "enforced" or not spec:
            raise ValueError(f"bad mode {text!r}")
        if spec == "all":
            return cls("enforced", TOOL_ORDER)
        if spec == "none":
            return cls("enforced", ())
        try:
            return cls("enforced", sort_kinds(spec.split("+")))
        except ValueError:
            raise ValueError(f"bad tool list in mode {text!r}") from None

    def __str__(self):
        if self.kind == "selective":
            return "selective"
        if self.tools == TOOL_ORDER:
            return "enforced:all"
        return "enforced:" + ("+".join(k.value for k in self.tools) or "none")


@dataclass
class ToolContext:
    registry: ToolRegistry
    cache: ToolCache | None = None
    policy: str = "strict"


def _finish(
    sample: Sample,
    transcript: list[ChatMessage],
    text: str,
    space: LabelSpace,
    tools_called: Iterable[ToolKind],
    turn_count: int,
    lenient: bool,
) -> ModerationResult:
    parsed = parse_model_output(text, space)
    common = dict(
        sample_id=sample.id,
        transcript=tuple(transcript),
        tools_called=frozenset(tools_called),
        turn_count=turn_count,
        reasoning=parsed.reasoning,
    )
    if parsed.answer is None:
        return ModerationResult(predicted_label=None, failure=Failure.UNPARSEABLE_ANSWER, **common)
    report = validate_format(text, space, "final_turn")
    if not report.valid and not lenient:
        detail = ",".join(v.value for v in report.violations)
        return ModerationResult(predicted_label=None, failure=Failure.FORMAT_INVALID, detail=detail, **common)
    return ModerationResult(predicted_label=parsed.answer, **common)


def moderate_enforced(
    sample: Sample,
    image: bytes,
    kinds: Iterable[ToolKind | str],
    backend: ChatBackend,
    params: GenerationParams = INFERENCE_PARAMS,
    *,
    space: LabelSpace,
    tools: ToolContext,
    lenient: bool = False,
) -> ModerationResult:
    """Single-shot moderation with the given tools' outputs injected into the prompt."""
    kinds = sort_kinds(kinds)
    bundle = ToolBundle(image_digest(image))
    if kinds:
        try:
            bundle = gather_tools(image, kinds, tools.registry, tools.cache, tools.policy)
        except ToolError as exc:
            return ModerationResult(sample.id, None, failure=Failure.TOOL_ERROR, detail=str(exc))
    prompt = build_enforced_prompt(sample, bundle, space)
    try:
        text = chat_complete(backend, prompt, params)
    except BackendError as exc:
        return ModerationResult(
            sample.id, None, tuple(prompt), frozenset(bundle.outputs), 0, Failure.BACKEND_ERROR, detail=str(exc)
        )
    transcript = [*prompt, text_message("assistant", text)]
    return _finish(sample, transcript, text, space, bundle.outputs, 1, lenient)


def moderate_selective(
    sample: Sample,
    image: bytes,
    backend: ChatBackend,
    params: GenerationParams = INFERENCE_PARAMS,
    max_tool_turns: int = DEFAULT_MAX_TOOL_TURNS,
    *,
    space: LabelSpace,
    tools: ToolContext,
    lenient: bool = False,
) -> ModerationResult:
    """Multi-turn loop: generate, run requested tools, feed results back, until an answer."""
    if max_tool_turns < 0:
        raise ValueError("max_tool_turns must be >= 0")
    convo = build_selective_prompt(sample, space)
    bundle = ToolBundle(image_digest(image))
    called: list[ToolKind] = []
    turns = 0
    tool_turns = 0

    def fail(reason: Failure, detail: str | None = None) -> ModerationResult:
        return ModerationResult(sample.id, None, tuple(convo), frozenset(called), turns, reason, detail=detail)

    while True:
        try:
            text = chat_complete(backend, convo, params)
        except BackendError as exc:
            return fail(Failure.BACKEND_ERROR, str(exc))
        turns += 1
        convo.append(text_message("assistant", text))
        parsed = parse_model_output(text, space)
        if not parsed.tool_calls:
            return _finish(sample, convo, text, space, called, turns, lenient)
        if tool_turns >= max_tool_turns:
            return fail(Failure.TOOL_LOOP_EXCEEDED, f"still calling tools after {tool_turns} tool turns")

        requested = list(dict.fromkeys(parsed.tool_calls))
        fresh = [k for k in requested if k not in bundle.outputs]
        if fresh:
            try:
                got = gather_tools(image, fresh, tools.registry, tools.cache, "strict")
            except ToolError as exc:
                return fail(Failure.TOOL_ERROR, str(exc))
            bundle.outputs.update(got.outputs)
        convo = append_tool_turn(convo, requested, bundle)
        called.extend(k for k in requested if k not in called)
        tool_turns += 1


@dataclass
class BatchRun:
    results: list[ModerationResult]
    metadata: dict[str, Any] = field(default_factory=dict)


def run_batch(
    manifest: DatasetManifest,
    mode: Mode | str,
    backend: ChatBackend,
    params: GenerationParams = INFERENCE_PARAMS,
    parallelism: int = 1,
    *,
    tools: ToolContext,
    images: ImageStore | None = None,
    missing_image: str = "skip",
    max_tool_turns: int = DEFAULT_MAX_TOOL_TURNS,
    lenient: bool = False,
) -> BatchRun:
    """Moderate every manifest sample; results come back in manifest order."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if missing_image not in ("skip", "error"):
        raise ValueError(f"unknown missing-image policy {missing_image!r}")
    mode = Mode.parse(mode) if isinstance(mode, str) else mode
    images = images or ImageStore(manifest.base_dir)
    space = manifest.label_space

    def one(sample: Sample) -> ModerationResult:
        try:
            image = images.read(sample.image_ref)
        except FileNotFoundError as exc:
            if missing_image == "error":
                raise
            logger.warning("sample %s: %s", sample.id, exc)
            return ModerationResult(sample.id, None, failure=Failure.MISSING_IMAGE, detail=sample.image_ref)
        if mode.kind == "selective":
            return moderate_selective(
                sample, image, backend, params, max_tool_turns, space=space, tools=tools, lenient=lenient
            )
        return moderate_enforced(sample, image, mode.tools, backend, params, space=space, tools=tools, lenient=lenient)

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        results = list(pool.map(one, manifest.samples))
    metadata = {
        "dataset_name": manifest.dataset_name,
        "split": manifest.split,
        "label_space": space.to_dict(),
        "mode": str(mode),
        "params": params.to_dict(),
        "backend": backend.name,
        "max_tool_turns": max_tool_turns,
        "n_samples": len(results),
        "n_failed": sum(1 for r in results if r.failure),
        "wall_time_s": round(time.perf_counter() - start, 3),
    }
    return BatchRun(results, metadata)


# wall time varies between runs, so it goes to the sidecar file only
_VOLATILE_KEYS = ("wall_time_s",)


def write_results(run: BatchRun, path: str | Path, extra_header: Mapping[str, Any] | None = None) -> Path:
    """Write results JSONL (header line + one result per line) and a ``.meta.json`` sidecar."""
    path = Path(path)
    header = {k: v for k, v in run.metadata.items() if k not in _VOLATILE_KEYS}
    header.update(extra_header or {})
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"kind": "header", "schema_version": RESULTS_SCHEMA_VERSION, **header}, sort_keys=True) + "\n")
        for r in run.results:
            f.write(json.dumps({"kind": "result", **r.to_dict()}, ensure_ascii=False, sort_keys=True) + "\n")
    meta = path.with_name(path.name + ".meta.json")
    meta.write_text(json.dumps({**run.metadata, **(extra_header or {})}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_results(path: str | Path) -> tuple[list[ModerationResult], dict[str, Any]]:
    results, header = [], {}
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind") == "header":
                if rec.get("schema_version") != RESULTS_SCHEMA_VERSION:
                    raise ValueError(f"{path}: unsupported results schema {rec.get('schema_version')!r}")
                header = rec
                continue
            try:
                results.append(ModerationResult.from_dict(rec))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad result record ({exc})") from exc
    return results, header


def make_moderation_server(
    address: tuple[str, int],
    backend: ChatBackend,
    mode: Mode | str,
    tools: ToolContext,
    images: ImageStore | None = None,
    params: GenerationParams = INFERENCE_PARAMS,
    spaces: Mapping[str, LabelSpace] | None = None,
    max_in_flight: int = 8,
    max_tool_turns: int = DEFAULT_MAX_TOOL_TURNS,
) -> JsonServer:
    """HTTP moderation service: ``POST /moderate`` and ``GET /healthz``."""
    mode = Mode.parse(mode) if isinstance(mode, str) else mode
    images = images or ImageStore()
    known = dict(PRESET_SPACES)
    known.update(spaces or {})

    def moderate(payload: Any) -> tuple[int, Any]:
        if not isinstance(payload, dict):
            raise HttpError(400, "body must be a JSON object")
        b64 = payload.get("image_b64")
        if not isinstance(b64, str) or not b64:
            raise HttpError(400, "image_b64 is required")
        try:
            image = base64.b64decode(b64, validate=True)
        except (binascii.Error, ValueError):
            raise HttpError(400, "image_b64 is not valid base64") from None
        if not image:
            raise HttpError(400, "image is empty")
        text = payload.get("text", "")
        if not isinstance(text, str):
            raise HttpError(400, "text must be a string")
        raw_space = payload.get("label_space")
        try:
            if isinstance(raw_space, dict):
                space = LabelSpace.from_dict(raw_space)
            elif isinstance(raw_space, str) and raw_space in known:
                space = known[raw_space]
            else:
                raise HttpError(400, f"unknown label_space {raw_space!r}")
        except ManifestError as exc:
            raise HttpError(400, str(exc)) from None

        ref = images.put(image)
        sample = Sample(id=ref[:16], image_ref=ref, text=text, gold_label="")
        if mode.kind == "selective":
            result = moderate_selective(sample, image, backend, params, max_tool_turns, space=space, tools=tools)
        else:
            result = moderate_enforced(sample, image, mode.tools, backend, params, space=space, tools=tools)
        body = {
            "label": result.predicted_label,
            "reasoning": result.reasoning,
            "tools_called": [k.value for k in sort_kinds(result.tools_called)],
            "turns": result.turn_count,
        }
        if result.failure in (Failure.BACKEND_ERROR, Failure.TOOL_ERROR):
            return 502, {**body, "error": result.failure.value, "detail": result.detail}
        if result.failure:
            body["failure"] = result.failure.value
        return 200, body

    return JsonServer(address, {"/moderate": moderate}, max_in_flight)
