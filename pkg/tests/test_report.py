import json

import pytest

from agentmod.metrics import ClassStats, MetricReport
from agentmod.report import fmt3, render_report
from agentmod.tools import ToolKind


@pytest.mark.parametrize("x, text", [(0.8075, "0.808"), (0.2025, "0.203"), (1, "1.000"), (0.0, "0.000"), (None, "-")])
def test_fmt3_rounds_half_up(x, text):
    assert fmt3(x) == text


def _report(name, acc, ratios=None):
    per = {"hateful": ClassStats(1.0, 1.0, 1.0, 1)}
    return MetricReport(name, acc, acc, "binary", per, 10, 0, ratios or {})


def test_render_report_files(tmp_path):
    ratios = {ToolKind.OCR: 0.203, ToolKind.CAPTIONER: 0.484, ToolKind.DETECTOR: 0.263}
    reports = [_report("hateful_memes", 0.655, {k: 1.0 for k in ToolKind}), _report("hateful_memes", 0.634, ratios)]
    paths = render_report(reports, ["w/ Force Tool", "w/ Select Tool"], tmp_path / "report.json")
    assert set(paths) == {"json", "txt", "tsv", "png"}
    tsv = paths["tsv"].read_text().splitlines()
    assert tsv[0].split("\t") == ["Model", "Accuracy", "F1-Score", "OCR Ratio", "Captioner Ratio", "Detector Ratio"]
    assert tsv[2].split("\t") == ["w/ Select Tool", "0.634", "0.634", "0.203", "0.484", "0.263"]
    doc = json.loads(paths["json"].read_text())
    assert doc["table"]["rows"][0][3:] == ["1.000", "1.000", "1.000"]
    assert "averaging=binary" in paths["txt"].read_text()
    assert paths["png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_multi_dataset_columns(tmp_path):
    reports = [_report("a", 0.5), _report("b", 0.6)]
    paths = render_report(reports, ["run", "run"], tmp_path / "r", figure=False)
    header = paths["tsv"].read_text().splitlines()[0].split("\t")
    assert header == ["Model", "a Accuracy", "a F1-Score", "b Accuracy", "b F1-Score"]
    assert "png" not in paths


def test_render_report_validation(tmp_path):
    with pytest.raises(ValueError):
        render_report([], [], tmp_path / "r")
    with pytest.raises(ValueError):
        render_report([_report("a", 0.5)], [], tmp_path / "r")
