"""Moderation dataset manifests.

A manifest is a JSONL file: one header record describing the dataset and
its label space, followed by one record per sample. Images are referenced
by path (relative to the manifest) or by a content-addressed key that an
:class:`ImageStore` resolves.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1

VIOLATING = "violating"
BENIGN = "benign"

# MMHS150K annotators pick one of six classes, stored as integers 0..5 upstream.
MMHS150K_CLASSES = ("not_hate", "racist", "sexist", "homophobe", "religion", "other_hate")


class ManifestError(ValueError):
    """Raised when a manifest (or one of its lines) is invalid."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class LabelSpace:
    name: str
    classes: tuple[str, ...]
    positive_class: str | None = None
    binarization_map: Mapping[str, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ManifestError(f"label space {self.name!r} has no classes")
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError(f"label space {self.name!r} has duplicate classes")
        if self.positive_class is not None and self.positive_class not in self.classes:
            raise ManifestError(
                f"positive class {self.positive_class!r} not in label space {self.name!r}"
            )
        if self.binarization_map is not None:
            object.__setattr__(self, "binarization_map", dict(self.binarization_map))

    def __hash__(self):
        bmap = tuple(sorted(self.binarization_map.items())) if self.binarization_map else None
        return hash((self.name, self.classes, self.positive_class, bmap))

    def canonical(self, label: str) -> str | None:
        """Return the class matching ``label`` case-insensitively, or None."""
        wanted = label.strip().casefold()
        for cls in self.classes:
            if cls.casefold() == wanted:
                return cls
        return None

    def binarized(self) -> LabelSpace:
        if not self.binarization_map:
            raise ManifestError(f"label space {self.name!r} has no binarization map")
        return LabelSpace(f"{self.name}:binarized", (VIOLATING, BENIGN), positive_class=VIOLATING)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "classes": list(self.classes),
            "positive_class": self.positive_class,
            "binarization_map": dict(self.binarization_map) if self.binarization_map else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LabelSpace:
        try:
            return cls(
                name=data["name"],
                classes=tuple(data["classes"]),
                positive_class=data.get("positive_class"),
                binarization_map=data.get("binarization_map"),
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed label space: {exc}") from exc


HATEFUL_MEMES = LabelSpace("hateful_memes", ("hateful", "not_hateful"), positive_class="hateful")
MMHS150K = LabelSpace(
    "mmhs150k",
    MMHS150K_CLASSES,
    binarization_map={c: (BENIGN if c == "not_hate" else VIOLATING) for c in MMHS150K_CLASSES},
)
PRESET_SPACES = {s.name: s for s in (HATEFUL_MEMES, MMHS150K)}


@dataclass(frozen=True)
class Sample:
    id: str
    image_ref: str
    text: str
    gold_label: str
    annotator_labels: tuple[str, ...] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "text": self.text,
            "gold_label": self.gold_label,
            "annotator_labels": list(self.annotator_labels) if self.annotator_labels else None,
        }


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    split: str
    samples: tuple[Sample, ...]
    label_space: LabelSpace
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split not in ("train", "test"):
            raise ManifestError(f"split must be 'train' or 'test', got {self.split!r}")
        seen: set[str] = set()
        for s in self.samples:
            _check_sample(s, self.label_space, seen)

    def __len__(self):
        return len(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def header(self) -> dict[str, Any]:
        return {
            "dataset_name": self.dataset_name,
            "split": self.split,
            "label_space": self.label_space.to_dict(),
        }


def _check_sample(sample: Sample, space: LabelSpace, seen: set[str], line: int | None = None):
    if sample.id in seen:
        raise ManifestError(f"duplicate sample id {sample.id!r}", line)
    seen.add(sample.id)
    if sample.gold_label not in space.classes:
        raise ManifestError(
            f"sample {sample.id!r}: label {sample.gold_label!r} outside label space {space.name!r}",
            line,
        )
    if sample.annotator_labels:
        majority = Counter(sample.annotator_labels).most_common(1)[0]
        if majority[1] < 2 or majority[0] != sample.gold_label:
            raise ManifestError(
                f"sample {sample.id!r}: gold label is not the annotator majority", line
            )


def _sample_from_record(rec: Any, line: int) -> Sample:
    if not isinstance(rec, dict):
        raise ManifestError("sample record must be a JSON object", line)
    try:
        ann = rec.get("annotator_labels")
        return Sample(
            id=str(rec["id"]),
            image_ref=str(rec["image_ref"]),
            text=rec.get("text") or "",
            gold_label=rec["gold_label"],
            annotator_labels=tuple(ann) if ann else None,
        )
    except KeyError as exc:
        raise ManifestError(f"sample record missing field {exc}", line) from exc


def load_manifest(path: str | Path, check_images: bool = False, images: ImageStore | None = None) -> DatasetManifest:
    """Load and validate a JSONL manifest.

    With ``check_images`` every ``image_ref`` must resolve, either against
    ``images`` or relative to the manifest's directory.
    """
    path = Path(path)
    header = None
    samples: list[Sample] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from exc
            if header is None:
                if not isinstance(rec, dict) or "label_space" not in rec:
                    raise ManifestError("first record must be a header with a label_space", lineno)
                header = rec
                space = LabelSpace.from_dict(rec["label_space"])
                continue
            sample = _sample_from_record(rec, lineno)
            _check_sample(sample, space, seen, lineno)
            samples.append(sample)
    if header is None:
        raise ManifestError(f"{path}: empty manifest (no header)")

    manifest = DatasetManifest(
        dataset_name=header.get("dataset_name", ""),
        split=header.get("split", ""),
        samples=tuple(samples),
        label_space=space,
        base_dir=path.parent,
    )
    if check_images:
        store = images or ImageStore(path.parent)
        for s in manifest.samples:
            if not store.exists(s.image_ref):
                raise ManifestError(f"sample {s.id!r}: image {s.image_ref!r} not found")
    return manifest


def export_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(manifest.header(), ensure_ascii=False) + "\n")
        for s in manifest.samples:
            f.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")
    return path


def _mmhs_class(label: Any) -> str:
    # upstream annotations are ints; accept names too
    if isinstance(label, int) and not isinstance(label, bool) and 0 <= label < len(MMHS150K_CLASSES):
        return MMHS150K_CLASSES[label]
    if isinstance(label, str) and label in MMHS150K_CLASSES:
        return label
    raise ManifestError(f"unknown MMHS150K class {label!r}")


def majority_filter(raw_annotations: Sequence[Any]) -> str | None:
    """Return the class chosen by at least two of three annotators, else None."""
    if len(raw_annotations) != 3:
        raise ManifestError(f"expected exactly 3 annotations, got {len(raw_annotations)}")
    labels = [_mmhs_class(a) for a in raw_annotations]
    label, count = Counter(labels).most_common(1)[0]
    return label if count >= 2 else None


def build_mmhs_manifest(raw_records: Iterable[Mapping[str, Any]], split: str) -> DatasetManifest:
    """Build an MMHS150K manifest, keeping only records with an annotator majority."""
    samples = []
    dropped = 0
    for rec in raw_records:
        labels = tuple(_mmhs_class(a) for a in rec["annotator_labels"])
        gold = majority_filter(labels)
        if gold is None:
            dropped += 1
            continue
        samples.append(
            Sample(
                id=str(rec["id"]),
                image_ref=str(rec["image_ref"]),
                text=rec.get("text") or "",
                gold_label=gold,
                annotator_labels=labels,
            )
        )
    logger.info("majority filter kept %d samples, dropped %d", len(samples), dropped)
    return DatasetManifest("mmhs150k", split, tuple(samples), MMHS150K)


def map_label(raw_label: str, space: LabelSpace, mode: str = "native") -> str:
    if mode == "native":
        if raw_label not in space.classes:
            raise ManifestError(f"label {raw_label!r} outside label space {space.name!r}")
        return raw_label
    if mode == "binarized":
        if not space.binarization_map:
            raise ManifestError(f"label space {space.name!r} has no binarization map")
        try:
            return space.binarization_map[raw_label]
        except KeyError:
            raise ManifestError(f"label {raw_label!r} has no binarized mapping") from None
    raise ValueError(f"unknown label mode {mode!r}")


KNOWN_SPLITS = {
    "mmhs150k": {"train": 74_177, "test": 3_781},
    "hateful_memes": {"train": 8_500, "test": 500},
    "unsafebench": {"train": 8_109, "test": 2_037},
}


def _normalize_dataset_name(name: str) -> str:
    return "".join(ch for ch in name.casefold() if ch.isalnum())


@dataclass(frozen=True)
class SplitReport:
    dataset_name: str
    split: str
    known: bool
    expected: int | None
    actual: int

    @property
    def match(self) -> bool:
        return self.known and self.expected == self.actual

    @property
    def message(self) -> str:
        if not self.known:
            return f"{self.dataset_name}/{self.split}: no published split size to compare"
        verdict = "match" if self.match else "MISMATCH"
        return f"{self.dataset_name}/{self.split}: {verdict} (expected {self.expected}, got {self.actual})"


def validate_known_splits(manifest: DatasetManifest) -> SplitReport:
    key = _normalize_dataset_name(manifest.dataset_name)
    table = {_normalize_dataset_name(k): v for k, v in KNOWN_SPLITS.items()}
    expected = table.get(key, {}).get(manifest.split)
    report = SplitReport(manifest.dataset_name, manifest.split, expected is not None, expected, len(manifest))
    if report.known and not report.match:
        logger.warning(report.message)
    return report


def content_key(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ImageStore:
    """Resolves image references to bytes.

    Lookup order: in-memory blobs, the content-addressed blob directory,
    then paths relative to ``root``.
    """

    def __init__(self, root: str | Path | None = None, blob_dir: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self.blob_dir = Path(blob_dir) if blob_dir is not None else None
        self._mem: dict[str, bytes] = {}

    def put(self, data: bytes) -> str:
        key = content_key(data)
        self._mem[key] = data
        return key

    def _path(self, ref: str) -> Path | None:
        candidates = []
        if self.blob_dir is not None:
            candidates.append(self.blob_dir / ref)
        p = Path(ref)
        if p.is_absolute():
            candidates.append(p)
        elif self.root is not None:
            candidates.append(self.root / p)
        for c in candidates:
            if c.is_file():
                return c
        return None

    def exists(self, ref: str) -> bool:
        return ref in self._mem or self._path(ref) is not None

    def read(self, ref: str) -> bytes:
        if ref in self._mem:
            return self._mem[ref]
        p = self._path(ref)
        if p is None:
            raise FileNotFoundError(f"image {ref!r} not found")
        return p.read_bytes()
