"""Accuracy, F1 and tool-call ratios over moderation results.

A failed result (no predicted label) is by default scored as wrong: it is
a false negative for its gold class and a false positive for no class.
With ``failures="excluded"`` failed results are dropped before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .dataset import DatasetManifest, LabelSpace, _normalize_dataset_name, map_label
from .runner import ModerationResult
from .tools import TOOL_ORDER, ToolKind

AVERAGINGS = ("binary", "macro", "weighted")
FAILURE_POLICIES = ("wrong", "excluded")


class EvalError(ValueError):
    pass


def default_averaging(dataset_name: str) -> str:
    return "binary" if _normalize_dataset_name(dataset_name) == "hatefulmemes" else "macro"


def _pairs(
    results: Sequence[ModerationResult],
    manifest: DatasetManifest,
    failures: str,
    label_mode: str = "native",
) -> list[tuple[str, str | None]]:
    if failures not in FAILURE_POLICIES:
        raise EvalError(f"unknown failure policy {failures!r}")
    gold = {s.id: s.gold_label for s in manifest.samples}
    ids = [r.sample_id for r in results]
    if len(set(ids)) != len(ids):
        raise EvalError("duplicate sample ids in results")
    if set(ids) != set(gold):
        missing = sorted(set(gold) - set(ids))[:5]
        extra = sorted(set(ids) - set(gold))[:5]
        raise EvalError(f"results do not align with manifest (missing {missing}, unknown {extra})")
    space = manifest.label_space
    pairs = []
    for r in results:
        if r.predicted_label is None and failures == "excluded":
            continue
        g = map_label(gold[r.sample_id], space, label_mode)
        p = map_label(r.predicted_label, space, label_mode) if r.predicted_label is not None else None
        pairs.append((g, p))
    return pairs


def accuracy(
    results: Sequence[ModerationResult],
    manifest: DatasetManifest,
    failures: str = "wrong",
    label_mode: str = "native",
) -> float:
    pairs = _pairs(results, manifest, failures, label_mode)
    if not pairs:
        return 0.0
    return sum(1 for g, p in pairs if g == p) / len(pairs)


@dataclass(frozen=True)
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "degenerate": self.degenerate,
        }


def per_class_stats(pairs: Sequence[tuple[str, str | None]], classes: Sequence[str]) -> dict[str, ClassStats]:
    stats = {}
    for c in classes:
        tp = sum(1 for g, p in pairs if g == c and p == c)
        fp = sum(1 for g, p in pairs if g != c and p == c)
        fn = sum(1 for g, p in pairs if g == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        stats[c] = ClassStats(precision, recall, f1, tp + fn, degenerate=(tp + fp == 0 and tp + fn == 0))
    return stats


def _space_for(manifest: DatasetManifest, label_mode: str) -> LabelSpace:
    return manifest.label_space.binarized() if label_mode == "binarized" else manifest.label_space


def f1(
    results: Sequence[ModerationResult],
    manifest: DatasetManifest,
    averaging: str = "macro",
    failures: str = "wrong",
    label_mode: str = "native",
) -> tuple[float, dict[str, ClassStats]]:
    """F1 under ``averaging`` plus the per-class table.

    Classes with neither predictions nor gold instances score F1 = 0 and are
    marked ``degenerate``; macro averaging still counts them.
    """
    if averaging not in AVERAGINGS:
        raise EvalError(f"unknown averaging {averaging!r}")
    space = _space_for(manifest, label_mode)
    if averaging == "binary" and space.positive_class is None:
        raise EvalError(f"binary F1 needs a positive class; label space {space.name!r} has none")
    pairs = _pairs(results, manifest, failures, label_mode)
    table = per_class_stats(pairs, space.classes)
    if averaging == "binary":
        score = table[space.positive_class].f1
    elif averaging == "macro":
        score = sum(s.f1 for s in table.values()) / len(table)
    else:
        total = sum(s.support for s in table.values())
        score = sum(s.f1 * s.support for s in table.values()) / total if total else 0.0
    return score, table


def tool_ratios(results: Sequence[ModerationResult]) -> dict[ToolKind, float]:
    """Share of successfully evaluated results that called each tool."""
    evaluated = [r for r in results if r.failure is None]
    if not evaluated:
        raise EvalError("no evaluated results to compute tool ratios over")
    return {k: sum(1 for r in evaluated if k in r.tools_called) / len(evaluated) for k in TOOL_ORDER}


@dataclass
class MetricReport:
    dataset_name: str
    accuracy: float
    f1: float
    f1_averaging: str
    per_class: dict[str, ClassStats]
    n_evaluated: int
    n_failed: int
    tool_ratios: dict[ToolKind, float] = field(default_factory=dict)
    failures: str = "wrong"
    label_mode: str = "native"

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset_name": self.dataset_name,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "f1_averaging": self.f1_averaging,
            "failures": self.failures,
            "label_mode": self.label_mode,
            "per_class": {c: s.to_dict() for c, s in self.per_class.items()},
            "tool_ratios": {k.value: v for k, v in self.tool_ratios.items()},
            "n_evaluated": self.n_evaluated,
            "n_failed": self.n_failed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MetricReport:
        return cls(
            dataset_name=data["dataset_name"],
            accuracy=data["accuracy"],
            f1=data["f1"],
            f1_averaging=data["f1_averaging"],
            per_class={c: ClassStats(**s) for c, s in data["per_class"].items()},
            n_evaluated=data["n_evaluated"],
            n_failed=data["n_failed"],
            tool_ratios={ToolKind(k): v for k, v in data.get("tool_ratios", {}).items()},
            failures=data.get("failures", "wrong"),
            label_mode=data.get("label_mode", "native"),
        )


def evaluate(
    results: Sequence[ModerationResult],
    manifest: DatasetManifest,
    averaging: str | None = None,
    failures: str = "wrong",
    label_mode: str = "native",
    with_ratios: bool = True,
) -> MetricReport:
    averaging = averaging or default_averaging(manifest.dataset_name)
    score, table = f1(results, manifest, averaging, failures, label_mode)
    n_failed = sum(1 for r in results if r.failure is not None)
    ratios = tool_ratios(results) if with_ratios and n_failed < len(results) else {}
    return MetricReport(
        dataset_name=manifest.dataset_name,
        accuracy=accuracy(results, manifest, failures, label_mode),
        f1=score,
        f1_averaging=averaging,
        per_class=table,
        n_evaluated=len(results) - n_failed,
        n_failed=n_failed,
        tool_ratios=ratios,
        failures=failures,
        label_mode=label_mode,
    )
