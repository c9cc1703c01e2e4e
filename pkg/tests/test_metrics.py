import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentmod.dataset import HATEFUL_MEMES, MMHS150K, DatasetManifest, LabelSpace, Sample
from agentmod.metrics import EvalError, MetricReport, accuracy, default_averaging, evaluate, f1, tool_ratios
from agentmod.runner import Failure, ModerationResult
from agentmod.tools import ToolKind

from oracles import oracle_scores


def build(gold, pred, space, name="x", tools=None):
    samples = tuple(Sample(f"s{i}", f"{i}.png", "", g) for i, g in enumerate(gold))
    manifest = DatasetManifest(name, "test", samples, space)
    results = []
    for i, p in enumerate(pred):
        called = frozenset(tools[i]) if tools else frozenset()
        if p is None:
            results.append(ModerationResult(f"s{i}", None, failure=Failure.UNPARSEABLE_ANSWER))
        else:
            results.append(ModerationResult(f"s{i}", p, tools_called=called))
    return manifest, results


def test_binary_known_values():
    gold = ["hateful", "hateful", "not_hateful", "not_hateful"]
    pred = ["hateful", "not_hateful", "hateful", "not_hateful"]
    manifest, results = build(gold, pred, HATEFUL_MEMES)
    assert accuracy(results, manifest) == 0.5
    score, table = f1(results, manifest, "binary")
    assert score == 0.5 and table["hateful"].support == 2


def test_failures_wrong_vs_excluded():
    manifest, results = build(["hateful", "hateful"], ["hateful", None], HATEFUL_MEMES)
    assert accuracy(results, manifest) == 0.5
    assert accuracy(results, manifest, failures="excluded") == 1.0
    with pytest.raises(EvalError):
        accuracy(results, manifest, failures="ignore")


def test_degenerate_class_counts_in_macro():
    space = LabelSpace("t", ("a", "b", "c"))
    manifest, results = build(["a", "b"], ["a", "b"], space)
    score, table = f1(results, manifest, "macro")
    assert table["c"].degenerate
    assert score == pytest.approx(2 / 3)


def test_binary_needs_positive_class():
    manifest, results = build(["racist"], ["racist"], MMHS150K)
    with pytest.raises(EvalError):
        f1(results, manifest, "binary")


def test_binarized_mode():
    manifest, results = build(["racist", "not_hate"], ["sexist", "not_hate"], MMHS150K)
    assert accuracy(results, manifest) == 0.5
    assert accuracy(results, manifest, label_mode="binarized") == 1.0
    score, _ = f1(results, manifest, "binary", label_mode="binarized")
    assert score == 1.0


def test_alignment_errors():
    manifest, results = build(["hateful", "hateful"], ["hateful", "hateful"], HATEFUL_MEMES)
    with pytest.raises(EvalError, match="align"):
        accuracy(results[:1], manifest)
    with pytest.raises(EvalError, match="duplicate"):
        accuracy([results[0], results[0]], manifest)


def test_default_averaging():
    assert default_averaging("Hateful Memes") == "binary"
    assert default_averaging("mmhs150k") == "macro"
    assert default_averaging("UnsafeBench") == "macro"


def test_tool_ratios_skip_failures():
    manifest, results = build(
        ["hateful"] * 3, ["hateful", "hateful", None], HATEFUL_MEMES, tools=[{ToolKind.OCR}, set(), set()]
    )
    ratios = tool_ratios(results)
    assert ratios == {ToolKind.OCR: 0.5, ToolKind.CAPTIONER: 0.0, ToolKind.DETECTOR: 0.0}


def test_report_round_trip():
    manifest, results = build(["hateful", "not_hateful"], ["hateful", "hateful"], HATEFUL_MEMES, "hateful_memes")
    report = evaluate(results, manifest)
    assert report.f1_averaging == "binary"
    assert MetricReport.from_dict(report.to_dict()) == report


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 80), st.integers(0, 2**32 - 1))
def test_metrics_match_oracle(k, n, seed):
    rng = random.Random(seed)
    classes = [f"c{i}" for i in range(k)]
    space = LabelSpace("t", tuple(classes), positive_class=classes[0])
    gold = [rng.choice(classes) for _ in range(n)]
    pred = [rng.choice(classes + [None]) for _ in range(n)]
    manifest, results = build(gold, pred, space)
    expected = oracle_scores(gold, pred, classes, classes[0])
    assert accuracy(results, manifest) == pytest.approx(expected["accuracy"], abs=1e-12)
    for avg in ("binary", "macro", "weighted"):
        assert f1(results, manifest, avg)[0] == pytest.approx(expected[avg], abs=1e-12)
