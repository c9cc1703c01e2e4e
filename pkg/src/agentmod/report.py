"""Report tables shaped like the accuracy/F1/tool-ratio comparison tables.

Each report becomes one cell group (dataset) in one row (run label). The
same numbers go to JSON, an aligned text table, a TSV and a PNG figure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Sequence

import matplotlib.pyplot as plt

from . import plotting
from .metrics import MetricReport
from .tools import TOOL_ORDER

REPORT_SCHEMA_VERSION = 1

_RATIO_HEADERS = {"ocr": "OCR Ratio", "captioner": "Captioner Ratio", "detector": "Detector Ratio"}


def fmt3(x: float | None) -> str:
    """Three decimals, rounding halves up (0.8075 -> 0.808)."""
    if x is None:
        return "-"
    return str(Decimal(repr(x)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


@dataclass
class _Table:
    header: list[str]
    rows: list[list[str]]


def _build_table(reports: Sequence[MetricReport], labels: Sequence[str]) -> _Table:
    datasets = list(dict.fromkeys(r.dataset_name for r in reports))
    runs = list(dict.fromkeys(labels))
    cell = {(lab, r.dataset_name): r for r, lab in zip(reports, labels)}
    ratio_sets = {d: any(r.tool_ratios for r in reports if r.dataset_name == d) for d in datasets}
    multi = len(datasets) > 1

    header = ["Model"]
    for d in datasets:
        prefix = f"{d} " if multi else ""
        header += [f"{prefix}Accuracy", f"{prefix}F1-Score"]
        if ratio_sets[d]:
            header += [f"{prefix}{_RATIO_HEADERS[k.value]}" for k in TOOL_ORDER]

    rows = []
    for run in runs:
        row = [run]
        for d in datasets:
            r = cell.get((run, d))
            row += [fmt3(r.accuracy if r else None), fmt3(r.f1 if r else None)]
            if ratio_sets[d]:
                row += [fmt3(r.tool_ratios.get(k) if r and r.tool_ratios else None) for k in TOOL_ORDER]
        rows.append(row)
    return _Table(header, rows)


def format_text_table(table: _Table) -> str:
    widths = [max(len(table.header[i]), *(len(r[i]) for r in table.rows)) for i in range(len(table.header))]

    def line(cells: Sequence[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()

    rule = "-" * len(line(table.header))
    return "\n".join([line(table.header), rule, *(line(r) for r in table.rows)]) + "\n"


def _figure(reports: Sequence[MetricReport], labels: Sequence[str], path: Path) -> Path:
    datasets = list(dict.fromkeys(r.dataset_name for r in reports))
    runs = list(dict.fromkeys(labels))
    cell = {(lab, r.dataset_name): r for r, lab in zip(reports, labels)}
    has_ratios = any(r.tool_ratios for r in reports)
    n_panels = len(datasets) + (1 if has_ratios else 0)
    with plt.rc_context(plotting.STYLE):
        fig, axes = plt.subplots(1, n_panels, figsize=plotting.figure_size(n_panels), squeeze=False)
        for ax, d in zip(axes[0], datasets):
            acc = [cell[(run, d)].accuracy if (run, d) in cell else None for run in runs]
            f1s = [cell[(run, d)].f1 if (run, d) in cell else None for run in runs]
            plotting.grouped_bars(ax, runs, {"Accuracy": acc, "F1": f1s}, ylabel="score")
            ax.set_title(d)
        if has_ratios:
            ax = axes[0][-1]
            rows = [(lab, r) for r, lab in zip(reports, labels) if r.tool_ratios]
            names = [f"{lab} ({r.dataset_name})" if len(datasets) > 1 else lab for lab, r in rows]
            series = {_RATIO_HEADERS[k.value]: [r.tool_ratios.get(k) for _, r in rows] for k in TOOL_ORDER}
            plotting.grouped_bars(ax, names, series, ylabel="call ratio")
            ax.set_title("Tool call ratios")
        fig.tight_layout()
        return plotting.savefig(fig, path)


def render_report(
    reports: Sequence[MetricReport],
    labels: Sequence[str],
    out: str | Path,
    metadata: dict[str, Any] | None = None,
    figure: bool = True,
) -> dict[str, Path]:
    """Write ``<out>.json``, ``<out>.txt``, ``<out>.tsv`` and ``<out>.png``.

    ``out`` may name the JSON file or the common stem.
    """
    if not reports:
        raise ValueError("no reports to render")
    if len(reports) != len(labels):
        raise ValueError("need one label per report")
    out = Path(out)
    stem = out.with_suffix("") if out.suffix in (".json", ".txt", ".tsv", ".png") else out
    stem.parent.mkdir(parents=True, exist_ok=True)

    table = _build_table(reports, labels)
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "runs": [{"label": lab, **r.to_dict()} for r, lab in zip(reports, labels)],
        "table": {"header": table.header, "rows": table.rows},
    }
    if metadata:
        doc["metadata"] = metadata
    paths = {
        "json": stem.with_suffix(".json"),
        "txt": stem.with_suffix(".txt"),
        "tsv": stem.with_suffix(".tsv"),
    }
    paths["json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = format_text_table(table)
    notes = sorted({f"{r.dataset_name}: F1 averaging={r.f1_averaging}, failures={r.failures}, labels={r.label_mode}" for r in reports})
    paths["txt"].write_text(text + "\n" + "\n".join(notes) + "\n", encoding="utf-8")
    paths["tsv"].write_text(
        "\n".join("\t".join(row) for row in [table.header, *table.rows]) + "\n", encoding="utf-8"
    )
    if figure:
        paths["png"] = _figure(reports, labels, stem.with_suffix(".png"))
    return paths
