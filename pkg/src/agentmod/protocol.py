"""Prompt construction and the model output grammar.

An assistant turn is either a tool turn::

    <think>...</think>
    <tool_call>{"name": "ocr"}</tool_call>

or a final turn::

    <think>...</think>
    <answer>label</answer>

Tool calls carry only a name; every tool acts on the current image.
Parsing never raises. Structural problems are reported by
:func:`validate_format`, which the format reward uses.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .dataset import LabelSpace, Sample
from .tools import (
    TOOL_DESCRIPTIONS,
    TOOL_ORDER,
    ToolBundle,
    ToolKind,
    render_tool_info,
    render_tool_output,
)

ROLES = ("system", "user", "assistant", "tool")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[dict[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(dict(p) for p in self.parts))
        if self.role not in ROLES:
            raise ProtocolError(f"unknown role {self.role!r}")
        images = 0
        for part in self.parts:
            if set(part) == {"text"}:
                continue
            if set(part) == {"image_ref"}:
                images += 1
                continue
            raise ProtocolError(f"bad message part {part!r}")
        if images and self.role != "user":
            raise ProtocolError(f"{self.role} messages cannot carry images")
        if images > 1:
            raise ProtocolError("at most one image per user message")

    @property
    def text(self) -> str:
        return "\n".join(p["text"] for p in self.parts if "text" in p)

    @property
    def image_ref(self) -> str | None:
        for p in self.parts:
            if "image_ref" in p:
                return p["image_ref"]
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "parts": [dict(p) for p in self.parts]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ChatMessage:
        return cls(data["role"], tuple(data["parts"]))


def text_message(role: str, text: str) -> ChatMessage:
    return ChatMessage(role, ({"text": text},))


def conversation_to_json(messages: Sequence[ChatMessage]) -> list[dict[str, Any]]:
    return [m.to_dict() for m in messages]


def conversation_from_json(data: Iterable[Mapping[str, Any]]) -> list[ChatMessage]:
    return [ChatMessage.from_dict(m) for m in data]


class Violation(str, enum.Enum):
    MISSING_THINK = "MISSING_THINK"
    MULTIPLE_THINK = "MULTIPLE_THINK"
    UNCLOSED_TAG = "UNCLOSED_TAG"
    MISSING_ANSWER = "MISSING_ANSWER"
    MULTIPLE_ANSWERS = "MULTIPLE_ANSWERS"
    ANSWER_OUTSIDE_SPACE = "ANSWER_OUTSIDE_SPACE"
    TOOLCALL_AND_ANSWER = "TOOLCALL_AND_ANSWER"
    MISSING_TOOL_CALL = "MISSING_TOOL_CALL"
    MALFORMED_TOOL_CALL = "MALFORMED_TOOL_CALL"
    OUT_OF_ORDER = "OUT_OF_ORDER"
    TRAILING_GARBAGE = "TRAILING_GARBAGE"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class ParsedOutput:
    reasoning: str | None = None
    tool_calls: tuple[ToolKind, ...] = ()
    answer: str | None = None
    raw: str = field(default="", compare=False)


@dataclass(frozen=True)
class FormatReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations


_TAGS = ("think", "answer", "tool_call")
_BLOCK_RE = re.compile(r"<(think|answer|tool_call)>(.*?)</\1>", re.DOTALL)
_OPEN_RE = {t: re.compile(f"<{t}>") for t in _TAGS}
_CLOSE_RE = {t: re.compile(f"</{t}>") for t in _TAGS}


@dataclass(frozen=True)
class _Block:
    tag: str
    body: str
    start: int
    end: int


def _blocks(text: str) -> list[_Block]:
    return [_Block(m.group(1), m.group(2), m.start(), m.end()) for m in _BLOCK_RE.finditer(text)]


def _tool_name(body: str) -> ToolKind | None:
    try:
        obj = json.loads(body)
    except ValueError:
        return None
    if not isinstance(obj, dict) or set(obj) != {"name"} or not isinstance(obj["name"], str):
        return None
    try:
        return ToolKind(obj["name"].strip().lower())
    except ValueError:
        return None


def parse_model_output(text: str, space: LabelSpace) -> ParsedOutput:
    """Extract reasoning, tool calls and answer from a model response.

    First-match semantics: the first think block and first answer tag win.
    A turn carrying both tool calls and an answer is read as a tool turn.
    """
    blocks = _blocks(text)
    calls = []
    answer_block = None
    for b in blocks:
        if b.tag == "tool_call":
            kind = _tool_name(b.body)
            if kind is not None:
                calls.append(kind)
        elif b.tag == "answer" and answer_block is None:
            answer_block = b

    answer = None
    if answer_block is not None and not calls:
        answer = space.canonical(answer_block.body)

    # reasoning only counts if it opens before the turn's action
    action_starts = [b.start for b in blocks if b.tag == "tool_call"]
    if answer_block is not None:
        action_starts.append(answer_block.start)
    first_action = min(action_starts, default=len(text) + 1)
    reasoning = None
    for b in blocks:
        if b.tag == "think":
            if b.start < first_action:
                reasoning = b.body
            break

    return ParsedOutput(reasoning=reasoning, tool_calls=tuple(calls), answer=answer, raw=text)


def _has_unclosed(text: str, blocks: list[_Block]) -> bool:
    for tag in _TAGS:
        n_blocks = sum(1 for b in blocks if b.tag == tag)
        if len(_OPEN_RE[tag].findall(text)) != n_blocks or len(_CLOSE_RE[tag].findall(text)) != n_blocks:
            return True
    return False


def validate_format(text: str, space: LabelSpace, mode: str = "final_turn") -> FormatReport:
    """Check ``text`` against the final-turn or tool-turn grammar."""
    if mode not in ("final_turn", "tool_turn"):
        raise ValueError(f"unknown mode {mode!r}")
    blocks = _blocks(text)
    found: list[Violation] = []

    def flag(v: Violation) -> None:
        if v not in found:
            found.append(v)

    if _has_unclosed(text, blocks):
        flag(Violation.UNCLOSED_TAG)

    thinks = [b for b in blocks if b.tag == "think"]
    answers = [b for b in blocks if b.tag == "answer"]
    calls = [b for b in blocks if b.tag == "tool_call"]
    if not thinks:
        flag(Violation.MISSING_THINK)
    elif len(thinks) > 1:
        flag(Violation.MULTIPLE_THINK)

    if mode == "final_turn":
        if not answers:
            flag(Violation.MISSING_ANSWER)
        elif len(answers) > 1:
            flag(Violation.MULTIPLE_ANSWERS)
        if answers and space.canonical(answers[0].body) is None:
            flag(Violation.ANSWER_OUTSIDE_SPACE)
        if calls:
            flag(Violation.TOOLCALL_AND_ANSWER)
    else:
        if answers:
            flag(Violation.TOOLCALL_AND_ANSWER)
        if not calls:
            flag(Violation.MISSING_TOOL_CALL)
        elif any(_tool_name(b.body) is None for b in calls):
            flag(Violation.MALFORMED_TOOL_CALL)

    if thinks:
        actions = answers + calls
        if actions and min(b.start for b in actions) < thinks[0].start:
            flag(Violation.OUT_OF_ORDER)

    # anything outside the blocks besides whitespace is stray content
    pos = 0
    stray = []
    for b in blocks:
        stray.append(text[pos:b.start])
        pos = b.end
    stray.append(text[pos:])
    if any(s.strip() for s in stray) and Violation.UNCLOSED_TAG not in found:
        flag(Violation.TRAILING_GARBAGE)

    return FormatReport(tuple(found))


def format_tool_call(kind: ToolKind | str) -> str:
    return "<tool_call>" + json.dumps({"name": ToolKind(kind).value}) + "</tool_call>"


def serialize_output(parsed: ParsedOutput) -> str:
    """Inverse of :func:`parse_model_output` for well-formed outputs."""
    pieces = []
    if parsed.reasoning is not None:
        pieces.append(f"<think>{parsed.reasoning}</think>")
    pieces.extend(format_tool_call(k) for k in parsed.tool_calls)
    if parsed.answer is not None:
        pieces.append(f"<answer>{parsed.answer}</answer>")
    return "\n".join(pieces)


_GRAMMAR_FINAL = (
    "Reason step by step inside <think>...</think>, then give exactly one label "
    "inside <answer>...</answer>. Write nothing after the answer tag."
)


def _labels_line(space: LabelSpace) -> str:
    return "Allowed labels: " + ", ".join(space.classes)


def _task_line(space: LabelSpace) -> str:
    return (
        "You are a content safety moderator. Decide whether the given image and its "
        f"accompanying text violate the content policy of the {space.name} task "
        "and classify the pair with one of the allowed labels."
    )


def _user_message(sample: Sample, extra: str | None = None) -> ChatMessage:
    parts: list[dict[str, str]] = [{"image_ref": sample.image_ref}]
    if sample.text:
        parts.append({"text": f"Text: {sample.text}"})
    if extra:
        parts.append({"text": extra})
    return ChatMessage("user", tuple(parts))


def build_enforced_prompt(sample: Sample, bundle: ToolBundle, space: LabelSpace) -> list[ChatMessage]:
    info = render_tool_info(bundle)
    lines = [_task_line(space), _labels_line(space)]
    if info:
        lines.append("Tool information about the image is provided with the input; use it in your reasoning.")
    lines.append(_GRAMMAR_FINAL)
    system = "\n".join(lines)
    extra = f"Tool information:\n{info}" if info else None
    return [text_message("system", system), _user_message(sample, extra)]


def build_selective_prompt(
    sample: Sample,
    space: LabelSpace,
    tool_descriptions: Mapping[ToolKind, str] = TOOL_DESCRIPTIONS,
) -> list[ChatMessage]:
    missing = [k for k in TOOL_ORDER if k not in tool_descriptions]
    if missing:
        raise ProtocolError(f"missing tool descriptions for {', '.join(map(str, missing))}")
    tool_lines = [f"- {k.value}: {tool_descriptions[k]}" for k in TOOL_ORDER]
    system = "\n".join(
        [
            _task_line(space),
            _labels_line(space),
            "You may call tools that inspect the image. Available tools:",
            *tool_lines,
            "To call tools, reason inside <think>...</think> and then emit one "
            '<tool_call>{"name": "TOOL"}</tool_call> per tool, with no answer tag. '
            "Tool results arrive in the next message. Call tools only when the "
            "image is hard to judge without them.",
            "When ready to decide: " + _GRAMMAR_FINAL,
        ]
    )
    return [text_message("system", system), _user_message(sample)]


def append_tool_turn(
    conversation: Sequence[ChatMessage],
    calls: Sequence[ToolKind | str],
    outputs: ToolBundle,
) -> list[ChatMessage]:
    """Return ``conversation`` extended by one tool message per call, in call order."""
    new = list(conversation)
    for kind in calls:
        kind = ToolKind(kind)
        if kind not in outputs.outputs:
            raise ProtocolError(f"no {kind} output in bundle for requested call")
        new.append(text_message("tool", render_tool_output(outputs.outputs[kind])))
    return new
