"""Teacher-driven reasoning data generation.

For every sample the teacher is sampled ``k`` times on the all-tools
prompt. Samples with at least one correct, well-formatted trace become SFT
examples (one correct trace picked at random under a seed); the rest go to
the GRPO pool. With selective data enabled, the teacher is also sampled
without tools to judge difficulty, and SFT samples are turned into
multi-turn tool-calling transcripts following the routing rules.
"""

from __future__ import annotations

import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

from .backends import TEACHER_PARAMS, BackendError, ChatBackend, GenerationParams, chat_complete
from .dataset import DatasetManifest, ImageStore, LabelSpace, Sample, map_label
from .protocol import (
    ChatMessage,
    ParsedOutput,
    append_tool_turn,
    build_enforced_prompt,
    build_selective_prompt,
    conversation_from_json,
    conversation_to_json,
    format_tool_call,
    parse_model_output,
    serialize_output,
    text_message,
    validate_format,
)
from .router import DEFAULT_SIMPLE_THRESHOLD, RoutingDecision, decide, decide_simple, signals_from_bundle
from .tools import TOOL_ORDER, ToolBundle, ToolCache, ToolKind, ToolRegistry, gather_tools, image_digest

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_K = 10


class DatagenError(RuntimeError):
    pass


@dataclass(frozen=True)
class TeacherTrace:
    sample_id: str
    raw: str
    parsed: ParsedOutput
    correct: bool
    generation_index: int
    format_valid: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "generation_index": self.generation_index,
            "raw": self.raw,
            "answer": self.parsed.answer,
            "correct": self.correct,
            "format_valid": self.format_valid,
        }


def grade_trace(trace: TeacherTrace, sample: Sample, space: LabelSpace, label_mode: str = "native") -> bool:
    answer = trace.parsed.answer
    if answer is None:
        return False
    return map_label(answer, space, label_mode) == map_label(sample.gold_label, space, label_mode)


def sample_teacher(
    backend: ChatBackend,
    prompt: Sequence[ChatMessage],
    k: int = DEFAULT_K,
    params: GenerationParams = TEACHER_PARAMS,
    *,
    sample: Sample,
    space: LabelSpace,
    seed: int = 0,
    label_mode: str = "native",
) -> list[TeacherTrace]:
    """Draw ``k`` graded teacher responses for one prompt.

    Generation ``i`` is requested with seed ``seed + i``. Non-retryable
    failures become empty traces; a backend still unreachable after its
    retry budget aborts.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    traces = []
    for i in range(k):
        try:
            raw = chat_complete(backend, prompt, params.with_seed(seed + i))
        except BackendError as exc:
            if exc.retryable:
                raise DatagenError(f"teacher unreachable for sample {sample.id!r}: {exc}") from exc
            logger.warning("sample %s generation %d failed: %s", sample.id, i, exc)
            raw = ""
        parsed = parse_model_output(raw, space)
        trace = TeacherTrace(sample.id, raw, parsed, False, i, validate_format(raw, space, "final_turn").valid)
        traces.append(_with_grade(trace, sample, space, label_mode))
    return traces


def _with_grade(trace: TeacherTrace, sample: Sample, space: LabelSpace, label_mode: str) -> TeacherTrace:
    return TeacherTrace(
        trace.sample_id,
        trace.raw,
        trace.parsed,
        grade_trace(trace, sample, space, label_mode),
        trace.generation_index,
        trace.format_valid,
    )


@dataclass(frozen=True)
class SftExample:
    sample_id: str
    conversation: tuple[ChatMessage, ...]
    mode: str = "reasoning"


@dataclass(frozen=True)
class GrpoExample:
    sample_id: str
    conversation: tuple[ChatMessage, ...]
    gold_label: str


@dataclass(frozen=True)
class MultiTurnExample:
    sample_id: str
    system: ChatMessage
    conversation: tuple[ChatMessage, ...]
    route: RoutingDecision

    @property
    def full_conversation(self) -> tuple[ChatMessage, ...]:
        return (self.system, *self.conversation)


Example = Union[SftExample, GrpoExample, MultiTurnExample]


def _seeded_choice(items: Sequence[TeacherTrace], rng_seed: Any, sample_id: str) -> TeacherTrace:
    # str seeds hash deterministically across processes
    return random.Random(f"{rng_seed}:{sample_id}").choice(list(items))


def eligible_traces(traces: Sequence[TeacherTrace]) -> list[TeacherTrace]:
    return [t for t in traces if t.correct and t.format_valid]


def partition(
    sample: Sample,
    traces: Sequence[TeacherTrace],
    prompt: Sequence[ChatMessage],
    rng_seed: Any = 0,
) -> SftExample | GrpoExample:
    """Send a graded sample to SFT (random correct trace) or to the GRPO pool."""
    if not traces:
        raise ValueError(f"sample {sample.id!r}: no traces to partition")
    eligible = eligible_traces(traces)
    n_unformatted = sum(1 for t in traces if t.correct and not t.format_valid)
    if n_unformatted:
        logger.info("sample %s: %d correct traces rejected for format", sample.id, n_unformatted)
    if not eligible:
        return GrpoExample(sample.id, tuple(prompt), sample.gold_label)
    chosen = _seeded_choice(eligible, rng_seed, sample.id)
    final = text_message("assistant", serialize_output(chosen.parsed))
    return SftExample(sample.id, (*prompt, final), "reasoning")


def answer_only(example: SftExample) -> SftExample:
    """Drop the reasoning from an SFT target, keeping only the answer tag."""
    *prompt, final = example.conversation
    parsed = ParsedOutput(answer=_answer_of(final.text))
    return SftExample(example.sample_id, (*prompt, text_message("assistant", serialize_output(parsed))), "answer_only")


def _answer_of(text: str) -> str:
    start, end = text.find("<answer>"), text.find("</answer>")
    return text[start + len("<answer>"):end]


def _tool_turn_reasoning(route: RoutingDecision) -> str:
    lines = ["I cannot judge this image-text pair confidently from the input alone."]
    if route.call_ocr:
        lines.append("The image has overlaid text, so I will read it with OCR.")
    if route.call_captioner:
        lines.append("A caption will give me the overall visual context.")
    if route.call_detector:
        lines.append("The scene contains many objects, so I will run the object detector.")
    return " ".join(lines)


def synthesize_multiturn(
    sample: Sample,
    route: RoutingDecision,
    bundle: ToolBundle,
    final_trace: TeacherTrace,
    space: LabelSpace,
) -> MultiTurnExample:
    """Build a tool-calling transcript whose calls follow ``route``.

    The transcript excludes the system message, which is kept separately:
    ``[user, assistant(tool calls), tool..., assistant(answer)]``, or
    ``[user, assistant(answer)]`` for simple routes.
    """
    if not final_trace.correct:
        raise ValueError(f"sample {sample.id!r}: final trace is not correct")
    missing = [k for k in route.kinds if k not in bundle.outputs]
    if missing:
        raise ValueError(f"sample {sample.id!r}: route needs {missing} but bundle lacks them")
    system, user = build_selective_prompt(sample, space)
    convo: list[ChatMessage] = [user]
    if route.kinds:
        calls = "\n".join(format_tool_call(k) for k in route.kinds)
        convo.append(text_message("assistant", f"<think>{_tool_turn_reasoning(route)}</think>\n{calls}"))
        convo = append_tool_turn(convo, route.kinds, bundle)
    convo.append(text_message("assistant", serialize_output(final_trace.parsed)))
    return MultiTurnExample(sample.id, system, tuple(convo), route)


def check_example_format(example: Example, space: LabelSpace) -> list[str]:
    """Return a list of problems; empty when every assistant turn validates in its mode."""
    problems = []
    if isinstance(example, GrpoExample):
        if any(m.role == "assistant" for m in example.conversation):
            problems.append("GRPO prompt contains an assistant turn")
        return problems
    assistants = [m for m in example.conversation if m.role == "assistant"]
    if not assistants:
        return ["no assistant turn"]
    if isinstance(example, SftExample) and example.mode == "answer_only":
        parsed = parse_model_output(assistants[-1].text, space)
        if parsed.answer is None or parsed.reasoning is not None:
            problems.append("answer-only target malformed")
        return problems
    for i, m in enumerate(assistants):
        mode = "final_turn" if i == len(assistants) - 1 else "tool_turn"
        report = validate_format(m.text, space, mode)
        if not report.valid:
            problems.append(f"assistant turn {i} ({mode}): {[str(v) for v in report.violations]}")
    if isinstance(example, MultiTurnExample):
        requested = [k for m in assistants[:-1] for k in parse_model_output(m.text, space).tool_calls]
        if tuple(requested) != example.route.kinds:
            problems.append("tool calls do not match route")
        roles = [m.role for m in example.conversation]
        for a, b in zip(roles, roles[1:]):
            if (a, b) not in {("user", "assistant"), ("assistant", "tool"), ("tool", "tool"), ("tool", "assistant")}:
                problems.append(f"illegal turn order {a} -> {b}")
                break
    return problems


# -- training configs ------------------------------------------------------

LORA_TARGET_MODULES = ["q_proj", "v_proj", "k_proj", "o_proj", "gate_proj", "up_proj", "down_proj"]

_LORA_ADAPTER = {
    "r": 16,
    "lora_alpha": 32,
    "lora_dropout": 0.1,
    "target_modules": LORA_TARGET_MODULES,
}

_OPTIMIZER = {
    "optim": "adamw_torch",
    "lr_scheduler_type": "cosine",
    "weight_decay": 0.1,
    "warmup_ratio": 0.1,
    "bf16": True,
    "torch_dtype": "bfloat16",
}


def training_config(stage: str) -> dict[str, Any]:
    if stage == "lora":
        return {
            "stage": "lora",
            **_OPTIMIZER,
            "learning_rate": 1e-5,
            "per_device_train_batch_size": 1,
            "gradient_accumulation_steps": 16,
            "num_train_epochs": {"mmhs150k": 2, "hateful_memes": 3, "unsafebench": 3},
            "lora": dict(_LORA_ADAPTER),
            "comment": "warmup_ratio reads the listed 0.1 as applying to both weight decay and warmup.",
        }
    if stage == "grpo":
        return {
            "stage": "grpo",
            **_OPTIMIZER,
            "learning_rate": 1e-5,
            "num_train_epochs": 1,
            "per_device_train_batch_size": 1,
            "gradient_accumulation_steps": 8,
            "loss_type": "dr_grpo",
            "num_iterations": 2,
            "num_generations": 16,
            "reward_funcs": ["answer", "format"],
            "reward_weights": [4, 1],
            "lora": dict(_LORA_ADAPTER),
            "comment": "Source lists epochs as 1e-6, a duplicate of a learning-rate value; one epoch is used.",
        }
    raise ValueError(f"unknown training stage {stage!r}")


def emit_training_config(stage: str, out: str | Path, metadata: Mapping[str, Any] | None = None) -> Path:
    config = training_config(stage)
    if metadata:
        config["metadata"] = dict(metadata)
    out = Path(out)
    try:
        out.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatagenError(f"cannot write training config to {out}: {exc}") from exc
    return out


# -- JSONL export ----------------------------------------------------------

def example_to_record(example: Example) -> dict[str, Any]:
    if isinstance(example, SftExample):
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "sft",
            "sample_id": example.sample_id,
            "mode": example.mode,
            "conversation": conversation_to_json(example.conversation),
        }
    if isinstance(example, GrpoExample):
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "grpo",
            "sample_id": example.sample_id,
            "gold_label": example.gold_label,
            "conversation": conversation_to_json(example.conversation),
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "multiturn",
        "sample_id": example.sample_id,
        "route": example.route.to_dict(),
        "system": example.system.to_dict(),
        "conversation": conversation_to_json(example.conversation),
    }


def example_from_record(rec: Mapping[str, Any]) -> Example:
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatagenError(f"unsupported schema_version {version!r}")
    convo = tuple(conversation_from_json(rec["conversation"]))
    kind = rec["kind"]
    if kind == "sft":
        return SftExample(rec["sample_id"], convo, rec["mode"])
    if kind == "grpo":
        return GrpoExample(rec["sample_id"], convo, rec["gold_label"])
    if kind == "multiturn":
        return MultiTurnExample(
            rec["sample_id"], ChatMessage.from_dict(rec["system"]), convo, RoutingDecision.from_dict(rec["route"])
        )
    raise DatagenError(f"unknown record kind {kind!r}")


def export_jsonl(pool: Iterable[Example], out: str | Path, header: Mapping[str, Any] | None = None) -> Path:
    """Write one record per line; an optional header line carries run metadata."""
    out = Path(out)
    try:
        with out.open("w", encoding="utf-8", newline="\n") as f:
            if header is not None:
                f.write(json.dumps({"schema_version": SCHEMA_VERSION, "kind": "header", **header}, sort_keys=True) + "\n")
            for ex in pool:
                f.write(json.dumps(example_to_record(ex), ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatagenError(f"cannot write {out}: {exc}") from exc
    return out


def import_jsonl(path: str | Path) -> list[Example]:
    pool = []
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind") == "header":
                continue
            try:
                pool.append(example_from_record(rec))
            except (KeyError, TypeError) as exc:
                raise DatagenError(f"{path}: line {lineno}: malformed record ({exc})") from exc
    return pool


# -- pipeline --------------------------------------------------------------

@dataclass
class DatagenSettings:
    k: int = DEFAULT_K
    seed: int = 0
    params: GenerationParams = TEACHER_PARAMS
    selective: bool = True
    simple_threshold: float = DEFAULT_SIMPLE_THRESHOLD
    tool_policy: str = "strict"
    missing_image: str = "error"
    label_mode: str = "native"
    parallelism: int = 1


@dataclass
class SampleOutcome:
    sample_id: str
    pool: str
    examples: list[Example] = field(default_factory=list)
    n_correct: int = 0
    route: RoutingDecision | None = None
    skipped_reason: str | None = None

    def to_record(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "pool": self.pool,
            "n_correct": self.n_correct,
            "route": self.route.to_dict() if self.route else None,
            "skipped_reason": self.skipped_reason,
            "examples": [example_to_record(e) for e in self.examples],
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> SampleOutcome:
        return cls(
            rec["sample_id"],
            rec["pool"],
            [example_from_record(e) for e in rec["examples"]],
            rec["n_correct"],
            RoutingDecision.from_dict(rec["route"]) if rec["route"] else None,
            rec["skipped_reason"],
        )


def process_sample(
    sample: Sample,
    manifest: DatasetManifest,
    teacher: ChatBackend,
    registry: ToolRegistry,
    images: ImageStore,
    settings: DatagenSettings,
    cache: ToolCache | None = None,
) -> SampleOutcome:
    space = manifest.label_space
    try:
        image = images.read(sample.image_ref)
    except FileNotFoundError:
        if settings.missing_image == "error":
            raise
        logger.warning("skipping sample %s: image %s missing", sample.id, sample.image_ref)
        return SampleOutcome(sample.id, "skipped", skipped_reason="MISSING_IMAGE")

    bundle = gather_tools(image, TOOL_ORDER, registry, cache, settings.tool_policy)
    prompt = build_enforced_prompt(sample, bundle, space)
    traces = sample_teacher(
        teacher, prompt, settings.k, settings.params,
        sample=sample, space=space, seed=settings.seed, label_mode=settings.label_mode,
    )
    example = partition(sample, traces, prompt, settings.seed)
    n_correct = sum(t.correct for t in traces)
    if isinstance(example, GrpoExample):
        return SampleOutcome(sample.id, "grpo", [example], n_correct)

    examples: list[Example] = [example, answer_only(example)]
    route = None
    if settings.selective and all(k in bundle.outputs for k in (ToolKind.OCR, ToolKind.DETECTOR)):
        bare_prompt = build_enforced_prompt(sample, ToolBundle(image_digest(image)), space)
        bare = sample_teacher(
            teacher, bare_prompt, settings.k, settings.params,
            sample=sample, space=space, seed=settings.seed, label_mode=settings.label_mode,
        )
        simple = decide_simple(sample, bare, settings.simple_threshold)
        route = decide(signals_from_bundle(bundle, simple))
        pool = eligible_traces(bare) if simple else []
        if not pool:
            pool = eligible_traces(traces)
        # the SFT pick already used this seed; reuse it so the reasoning matches
        final = _seeded_choice(pool, settings.seed, sample.id)
        examples.append(synthesize_multiturn(sample, route, bundle, final, space))
    return SampleOutcome(sample.id, "sft", examples, n_correct, route)


@dataclass
class DatagenSummary:
    n_samples: int
    n_sft: int
    n_grpo: int
    n_multiturn: int
    n_skipped: int
    files: dict[str, str]

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


PROGRESS_FILE = "progress.jsonl"


def _load_progress(path: Path) -> dict[str, SampleOutcome]:
    done: dict[str, SampleOutcome] = {}
    if not path.exists():
        return done
    with path.open(encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            try:
                outcome = SampleOutcome.from_record(json.loads(line))
            except (ValueError, KeyError, DatagenError):
                # a torn final line from an interrupted run
                continue
            done[outcome.sample_id] = outcome
    return done


def run_datagen(
    manifest: DatasetManifest,
    teacher: ChatBackend,
    registry: ToolRegistry,
    out_dir: str | Path,
    settings: DatagenSettings | None = None,
    images: ImageStore | None = None,
    cache: ToolCache | None = None,
    header: Mapping[str, Any] | None = None,
) -> DatagenSummary:
    """Run generation over a manifest and write sft/grpo/multiturn JSONL files.

    Completed samples are appended to ``progress.jsonl`` so an interrupted
    run resumes where it stopped. Output files are written in manifest order.
    """
    settings = settings or DatagenSettings()
    if settings.parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = images or ImageStore(manifest.base_dir)
    progress_path = out / PROGRESS_FILE
    done = _load_progress(progress_path)
    if done:
        logger.info("resuming: %d samples already complete", len(done))
    lock = threading.Lock()

    def work(sample: Sample) -> SampleOutcome:
        if sample.id in done:
            return done[sample.id]
        outcome = process_sample(sample, manifest, teacher, registry, images, settings, cache)
        line = json.dumps(outcome.to_record(), ensure_ascii=False, sort_keys=True)
        with lock, progress_path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")
        return outcome

    with ThreadPoolExecutor(max_workers=settings.parallelism) as pool:
        outcomes = list(pool.map(work, manifest.samples))

    sft = [e for o in outcomes for e in o.examples if isinstance(e, SftExample) and e.mode == "reasoning"]
    sft_answer = [e for o in outcomes for e in o.examples if isinstance(e, SftExample) and e.mode == "answer_only"]
    grpo = [e for o in outcomes for e in o.examples if isinstance(e, GrpoExample)]
    multi = [e for o in outcomes for e in o.examples if isinstance(e, MultiTurnExample)]

    header = dict(header or {})
    header.update({"dataset_name": manifest.dataset_name, "split": manifest.split, "seed": settings.seed, "k": settings.k})
    files = {
        "sft": export_jsonl(sft, out / "sft.jsonl", header),
        "sft_answer_only": export_jsonl(sft_answer, out / "sft_answer_only.jsonl", header),
        "grpo": export_jsonl(grpo, out / "grpo.jsonl", header),
        "multiturn": export_jsonl(multi, out / "multiturn.jsonl", header),
    }
    summary = DatagenSummary(
        n_samples=len(outcomes),
        n_sft=len(sft),
        n_grpo=len(grpo),
        n_multiturn=len(multi),
        n_skipped=sum(1 for o in outcomes if o.pool == "skipped"),
        files={k: v.name for k, v in files.items()},
    )
    (out / "summary.json").write_text(
        json.dumps({**header, **summary.to_dict()}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary
