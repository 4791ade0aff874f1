"""Tabular and graphical rendering of scenario results.

Emits the comparison table as CSV and JSON, a mean-AUC summary grouped
by mode, and a bar-chart figure of the same summary. Every output is a
deterministic function of the results: rows are sorted by scenario, all
text files use fixed float formatting and "\\n" newlines, and the figure
pins its own metadata, so identical results give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .errors import IoError
from .scenario import COMPARED_PAIRS, MODES, ScenarioResult
from .stats import holm_bonferroni

DEFAULT_COLUMNS = (0.0, 100.0, 750.0, 1500.0)
PAIR_NAMES = tuple(f"{a}_vs_{b}" for a, b in COMPARED_PAIRS)


def _spec_sort_key(result: ScenarioResult):
    spec = result.spec
    return (spec.kind, -len(spec.training_bvalues),
            spec.training_bvalues, spec.inference_bvalues)


def _mark_columns(results) -> tuple[float, ...]:
    bs = {b for r in results
          for b in r.spec.training_bvalues + r.spec.inference_bvalues}
    return tuple(sorted(bs)) if bs else DEFAULT_COLUMNS


def _train_mark(spec, b: float) -> str:
    return "x" if b in spec.training_bvalues else ""


def _test_mark(spec, b: float) -> str:
    """x: measured at inference; o: trained on but absent at inference."""
    if b in spec.inference_bvalues:
        return "x"
    if b in spec.training_bvalues:
        return "o"
    return ""


def _fold_sd(fold_aucs) -> float:
    if len(fold_aucs) < 2:
        return 0.0
    return float(np.std(np.array(fold_aucs, dtype=np.float64), ddof=1))


def _family_rejections(results, alpha: float) -> list[dict[str, bool]]:
    """Holm across every DeLong p in the table, in row-major pair order."""
    slots = []
    pvalues = []
    for i, r in enumerate(results):
        for name in PAIR_NAMES:
            if name in r.comparisons:
                slots.append((i, name))
                pvalues.append(r.comparisons[name].p_two_sided)
    decisions: list[dict[str, bool]] = [{} for _ in results]
    if pvalues:
        holm = holm_bonferroni(pvalues, alpha)
        for (i, name), rejected in zip(slots, holm.reject):
            decisions[i][name] = rejected
    return decisions


def _table_rows(results, columns, alpha):
    family = _family_rejections(results, alpha)
    rows = []
    for r, decisions in zip(results, family):
        row: dict[str, object] = {"kind": r.spec.kind}
        for b in columns:
            row[f"train_b{b:g}"] = _train_mark(r.spec, b)
        for b in columns:
            row[f"test_b{b:g}"] = _test_mark(r.spec, b)
        for mode in MODES:
            if mode in r.aucs:
                row[f"auc_{mode}"] = r.aucs[mode]
                row[f"sd_{mode}"] = _fold_sd(r.fold_aucs.get(mode, ()))
            else:
                row[f"auc_{mode}"] = None
                row[f"sd_{mode}"] = None
        for name in PAIR_NAMES:
            comp = r.comparisons.get(name)
            row[f"p_{name}"] = None if comp is None else comp.p_two_sided
            row[f"sig_{name}"] = decisions.get(name)
        rows.append(row)
    return rows


def _csv_text(rows, columns) -> str:
    header = ["kind"]
    header += [f"train_b{b:g}" for b in columns]
    header += [f"test_b{b:g}" for b in columns]
    for mode in MODES:
        header += [f"auc_{mode}", f"sd_{mode}"]
    for name in PAIR_NAMES:
        header += [f"p_{name}", f"sig_{name}"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        out = []
        for col in header:
            v = row[col]
            if v is None:
                out.append("")
            elif col.startswith(("auc_", "sd_")):
                out.append(f"{v:.6f}")
            elif col.startswith("p_"):
                out.append(f"{v:.6g}")
            elif col.startswith("sig_"):
                out.append("*" if v else "")
            else:
                out.append(v)
        writer.writerow(out)
    return buf.getvalue()


def _summary(results) -> dict:
    """Reduction for the bar chart: mean pooled AUC per mode, grouped by kind."""
    by_kind: dict[str, dict] = {}
    for kind in sorted({r.spec.kind for r in results}):
        group = [r for r in results if r.spec.kind == kind]
        means = {}
        for mode in MODES:
            values = [r.aucs[mode] for r in group if mode in r.aucs]
            if values:
                means[mode] = float(np.mean(values))
        by_kind[kind] = {"n_scenarios": len(group), "mode_mean_auc": means}
    return {"by_kind": by_kind, "modes": list(MODES)}


def _render_figure(summary: dict, path: Path) -> None:
    fig = Figure(figsize=(7.0, 4.0), dpi=150)
    FigureCanvasAgg(fig)
    ax = fig.subplots()
    kinds = sorted(summary["by_kind"])
    modes = [m for m in MODES
             if any(m in summary["by_kind"][k]["mode_mean_auc"] for k in kinds)]
    width = 0.8 / max(len(kinds), 1)
    x = np.arange(len(modes), dtype=np.float64)
    colors = ("#4878a8", "#e49444", "#6a9f58", "#a87c9f")
    for j, kind in enumerate(kinds):
        means = summary["by_kind"][kind]["mode_mean_auc"]
        heights = [means.get(m, 0.0) for m in modes]
        ax.bar(x + j * width, heights, width=width,
               color=colors[j % len(colors)], label=kind)
    ax.set_xticks(x + width * (len(kinds) - 1) / 2 if kinds else x)
    ax.set_xticklabels(modes, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("mean AUC")
    ax.set_title("mean AUC by mode")
    if kinds:
        ax.legend(frameon=False)
    fig.subplots_adjust(bottom=0.25)
    fig.savefig(path, format="png", metadata={"Software": "dwiadapt"})


def emit_report(results, out_dir, *, alpha: float = 0.05, figure: bool = True) -> dict[str, Path]:
    """Write report.csv, report.json, summary.json (and summary.png).

    Rows are sorted by (kind, training size, protocols) so the table does
    not depend on the caller's result order. Returns the written paths.
    """
    results = sorted(results, key=_spec_sort_key)
    columns = _mark_columns(results)
    rows = _table_rows(results, columns, alpha)
    report = {
        "alpha": alpha,
        "b_columns": list(columns),
        "rows": [
            dict(
                row,
                fold_aucs={m: list(v) for m, v in r.fold_aucs.items()},
                training_bvalues=list(r.spec.training_bvalues),
                inference_bvalues=list(r.spec.inference_bvalues),
                holm_within=None if r.holm is None else {
                    "pvalues": list(r.holm.pvalues),
                    "reject": list(r.holm.reject),
                    "alpha": r.holm.alpha,
                },
            )
            for r, row in zip(results, rows)
        ],
    }
    for row in report["rows"]:
        for name in PAIR_NAMES:
            row[f"sig_{name}"] = bool(row[f"sig_{name}"]) if row[f"sig_{name}"] is not None else None
    summary = _summary(results)
    out_dir = Path(out_dir)
    paths = {
        "csv": out_dir / "report.csv",
        "json": out_dir / "report.json",
        "summary": out_dir / "summary.json",
    }
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths["csv"].write_text(_csv_text(rows, columns), encoding="utf-8")
        paths["json"].write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        paths["summary"].write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        if figure:
            paths["figure"] = out_dir / "summary.png"
            _render_figure(summary, paths["figure"])
    except OSError as e:
        raise IoError(f"cannot write report to {out_dir}: {e}") from e
    return paths
