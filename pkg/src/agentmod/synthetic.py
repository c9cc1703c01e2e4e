"""Synthetic corpora and a simulated chat model for offline runs.

The simulated model answers correctly with a fixed probability, decided by
hashing the image, the request seed and the turn, so replies are a pure
function of the conversation. In selective conversations it requests the
tools the routing rules would pick for hard images.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .backends import ChatBackend, GenerationParams, conversation_digest
from .dataset import HATEFUL_MEMES, DatasetManifest, LabelSpace, Sample, export_manifest
from .protocol import ChatMessage, format_tool_call
from .router import decide, signals_from_bundle
from .tools import TOOL_ORDER, ToolBundle, image_digest, normalize_output

_WORDS = ["look", "at", "this", "they", "never", "learn", "go", "home", "love", "team", "win", "again"]
_OBJECTS = ["person", "sign", "flag", "car", "dog", "bottle", "knife", "chair", "tree", "phone"]
_SCENES = ["a man holding a sign", "a crowd at a stadium", "a dog on a sofa", "two people smiling", "a street at night"]


def _unit(*parts: Any) -> float:
    h = hashlib.sha256(":".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def make_tool_payloads(rng: random.Random) -> dict[str, Any]:
    n_words = rng.choice([0, 0, 3, 5])
    n_objects = rng.randint(0, 9)
    items = []
    for _ in range(n_objects):
        x0, y0 = rng.randint(0, 300), rng.randint(0, 300)
        items.append(
            {
                "label": rng.choice(_OBJECTS),
                "confidence": round(rng.uniform(0.35, 0.99), 2),
                "bbox": [x0, y0, x0 + rng.randint(5, 200), y0 + rng.randint(5, 200)],
            }
        )
    return {
        "ocr": {"text": " ".join(rng.choice(_WORDS) for _ in range(n_words))},
        "captioner": {"text": rng.choice(_SCENES)},
        "detector": {"items": items},
    }


@dataclass
class Corpus:
    root: Path
    manifest: DatasetManifest
    images: dict[str, bytes]
    tool_table: dict[str, dict[str, Any]]

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"

    @property
    def tools_path(self) -> Path:
        return self.root / "tools.json"


def make_corpus(
    root: str | Path | None,
    n: int,
    space: LabelSpace = HATEFUL_MEMES,
    seed: int = 0,
    dataset_name: str = "synthetic",
    split: str = "test",
) -> Corpus:
    """Build ``n`` samples with random image bytes and scripted tool outputs.

    With ``root`` set, writes ``manifest.jsonl``, ``images/`` and ``tools.json``.
    """
    rng = random.Random(seed)
    samples, images, table = [], {}, {}
    for i in range(n):
        sid = f"s{i:05d}"
        data = f"image-{seed}-{i}-".encode() + rng.randbytes(32)
        ref = f"images/{sid}.bin"
        images[ref] = data
        table[image_digest(data)] = make_tool_payloads(rng)
        text = " ".join(rng.choice(_WORDS) for _ in range(rng.randint(0, 6)))
        samples.append(Sample(sid, ref, text, rng.choice(space.classes)))
    base = Path(root) if root is not None else None
    manifest = DatasetManifest(dataset_name, split, tuple(samples), space, base_dir=base)
    corpus = Corpus(base or Path("."), manifest, images, table)
    if root is not None:
        corpus.root.mkdir(parents=True, exist_ok=True)
        (corpus.root / "images").mkdir(exist_ok=True)
        for ref, data in images.items():
            (corpus.root / ref).write_bytes(data)
        export_manifest(manifest, corpus.manifest_path)
        corpus.tools_path.write_text(json.dumps(table, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return corpus


class SimulatedModel(ChatBackend):
    """Deterministic stand-in for a teacher or student model."""

    def __init__(
        self,
        corpus: Corpus,
        accuracy: float = 0.7,
        simple_fraction: float = 0.4,
        seed: int = 0,
        name: str = "simulated",
    ):
        self.sample_by_ref = {s.image_ref: s for s in corpus.manifest.samples}
        self.digest_by_ref = {ref: image_digest(data) for ref, data in corpus.images.items()}
        self.tool_table = corpus.tool_table
        self.accuracy = accuracy
        self.simple_fraction = simple_fraction
        self.seed = seed
        self.name = name
        self.classes = corpus.manifest.label_space.classes

    def _route(self, digest: str):
        simple = _unit(self.seed, "simple", digest) < self.simple_fraction
        payloads = self.tool_table[digest]
        bundle = ToolBundle(digest, {k: normalize_output(k, payloads[k.value]) for k in TOOL_ORDER})
        return decide(signals_from_bundle(bundle, simple))

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
        user = next(m for m in messages if m.role == "user")
        sample = self.sample_by_ref[user.image_ref]
        digest = self.digest_by_ref[sample.image_ref]
        turn = sum(1 for m in messages if m.role == "assistant")
        selective = "Available tools:" in messages[0].text
        has_tool_results = any(m.role == "tool" for m in messages)
        if selective and not has_tool_results:
            route = self._route(digest)
            if route.kinds:
                calls = "\n".join(format_tool_call(k) for k in route.kinds)
                return f"<think>The image is ambiguous; I need more detail.</think>\n{calls}"

        u = _unit(self.seed, digest, params.seed, turn)
        if u < self.accuracy:
            label = sample.gold_label
        else:
            others = [c for c in self.classes if c != sample.gold_label] or [sample.gold_label]
            label = others[int(_unit(self.seed, "wrong", digest, params.seed) * len(others))]
        evidence = "the caption and detected objects" if "Caption:" in "\n".join(m.text for m in messages) else "the image and text"
        return f"<think>Considering {evidence}, the post reads as {label}.</think>\n<answer>{label}</answer>"


class RecordingBackend(ChatBackend):
    """Wraps a backend and records replies under fixture-backend keys."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.name = inner.name
        self.retries = inner.retries
        self.replies: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, messages, params):
        reply = self.inner.complete(messages, params)
        key = conversation_digest(messages)
        if params.seed is not None:
            key = f"{key}#{params.seed}"
        with self._lock:
            self.replies[key] = reply
        return reply

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"replies": dict(sorted(self.replies.items()))}, indent=1) + "\n", encoding="utf-8")
        return path

