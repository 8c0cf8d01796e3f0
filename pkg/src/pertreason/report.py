"""Report tables and figures for evaluation and case-study outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import CategoryResult, SpecificityReport  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across runs
_PNG_META = {"Software": None}


def _fmt(x: float | None, digits: int = 2) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def auroc_table_text(results: Sequence[CategoryResult], label: str = "model") -> str:
    """One row, one column per category, 'mean±std' cells."""
    cats = [r.category for r in results]
    cells = [f"{_fmt(r.mean)}±{_fmt(r.std)}" if r.mean is not None else "undefined" for r in results]
    widths = [max(len(c), len(v)) for c, v in zip(cats, cells)]
    first = max(len("Model"), len(label))
    head = "Model".ljust(first) + "  " + "  ".join(c.rjust(w) for c, w in zip(cats, widths))
    row = label.ljust(first) + "  " + "  ".join(v.rjust(w) for v, w in zip(cells, widths))
    rule = "-" * len(head)
    notes = [f"# {r.category}: {n}" for r in results for n in r.notes]
    return "\n".join([rule, head, rule, row, rule] + notes) + "\n"


def auroc_report_json(results: Sequence[CategoryResult], mode: str, accepted_only: bool) -> dict:
    return {
        "metric": "auroc",
        "aggregation": mode,
        "accepted_only": accepted_only,
        "categories": [
            {
                "category": r.category,
                "per_run": {str(k): v for k, v in sorted(r.per_run.items())},
                "mean": r.mean,
                "std": r.std,
                "n_records": r.n_records,
                "notes": r.notes,
            }
            for r in results
        ],
    }


def write_auroc_tsv(results: Sequence[CategoryResult], path: Path) -> None:
    runs = sorted({k for r in results for k in r.per_run})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["category", "n_records", "mean", "std"] + [f"run_{k}" for k in runs])
        for r in results:
            w.writerow(
                [r.category, r.n_records, _fmt(r.mean, 6), _fmt(r.std, 6)]
                + [_fmt(r.per_run.get(k), 6) for k in runs]
            )


def plot_auroc(results: Sequence[CategoryResult], path: Path, title: str = "AUROC by category") -> None:
    defined = [r for r in results if r.mean is not None]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(defined) + 1.5), 3.6))
    xs = range(len(defined))
    ax.bar(xs, [r.mean for r in defined], yerr=[r.std for r in defined], color="#4C72B0", capsize=3)
    ax.axhline(0.5, color="grey", lw=0.8, ls="--")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r.category for r in defined], rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("AUROC")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def specificity_text(reports: Sequence[SpecificityReport]) -> str:
    head = f"{'Drug':<16}{'Target':<10}{'Target rank':>12}{'Mean gap':>10}{'Relative dominance (%)':>24}"
    lines = ["-" * len(head), head, "-" * len(head)]
    for r in reports:
        dom = "undefined" if r.relative_dominance_pct is None else f"{r.relative_dominance_pct:.1f}"
        lines.append(f"{r.drug:<16}{r.target_cell:<10}{r.target_rank:>12}{r.mean_gap:>10.3f}{dom:>24}")
    lines.append("-" * len(head))
    for r in reports:
        ratios = ", ".join(f"{c}={v:.3f}" for c, v in sorted(r.ratios.items()))
        lines.append(f"# {r.drug} agreement ratios: {ratios}")
    return "\n".join(lines) + "\n"


def write_specificity_tsv(reports: Sequence[SpecificityReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["drug", "cell_line", "is_target", "agreement_ratio", "n_genes", "target_rank", "mean_gap", "relative_dominance_pct"])
        for r in reports:
            dom = "" if r.relative_dominance_pct is None else f"{r.relative_dominance_pct:.6f}"
            for cell, ratio in sorted(r.ratios.items()):
                w.writerow([r.drug, cell, int(cell == r.target_cell), f"{ratio:.6f}", r.counts.get(cell, ""), r.target_rank, f"{r.mean_gap:.6f}", dom])


def plot_specificity(reports: Sequence[SpecificityReport], path: Path) -> None:
    """Agreement-ratio bars per drug, target highlighted, rank above each bar."""
    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.6), squeeze=False)
    for ax, r in zip(axes[0], reports):
        cells = sorted(r.ratios, key=lambda c: (-r.ratios[c], c))
        vals = [r.ratios[c] for c in cells]
        colors = ["#C44E52" if c == r.target_cell else "#8C8C8C" for c in cells]
        bars = ax.bar(range(len(cells)), vals, color=colors)
        for c, b in zip(cells, bars):
            rank = 1 + sum(1 for o in r.ratios if o != c and r.ratios[o] > r.ratios[c])
            ax.text(b.get_x() + b.get_width() / 2, b.get_height() + 0.01, str(rank), ha="center", va="bottom", fontsize=8)
        ax.axhline(r.mean_ratio, color="black", lw=0.8, ls=":")
        ax.set_xticks(range(len(cells)))
        ax.set_xticklabels(cells, rotation=30, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_title(r.drug)
        ax.set_ylabel("agreement ratio")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
