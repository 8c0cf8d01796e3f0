"""Evaluation metrics: AUROC by category, agreement ratios and the
cell-line specificity trio (target rank, mean gap, relative dominance)."""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    pass


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2.

    Uses the rank-sum identity with midranks.
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    y = np.asarray(labels, dtype=int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    ranks = rankdata(np.asarray(scores, dtype=float))
    # doubled midranks are integers, so the numerator is exact
    r2 = int(round(2 * ranks[y == 1].sum()))
    return (r2 - n_pos * (n_pos + 1)) / (2 * n_pos * n_neg)


def aggregate_runs(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; a single run has std 0."""
    if not values:
        raise ValueError("no runs")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def agreement_ratio(predicted: Sequence[int], truth: Sequence[int]) -> float:
    if len(predicted) != len(truth):
        raise ValueError("length mismatch")
    if not truth:
        raise UndefinedMetric("no records")
    return sum(int(p == t) for p, t in zip(predicted, truth)) / len(truth)


def target_rank(ratios: Mapping[str, float], target: str) -> int:
    """1 + number of other cell lines with a strictly higher ratio."""
    if target not in ratios:
        raise KeyError(f"target {target!r} has no ratio")
    rt = ratios[target]
    return 1 + sum(1 for c, r in ratios.items() if c != target and r > rt)


def mean_gap(ratios: Mapping[str, float], target: str) -> float:
    """Target ratio minus the mean over all cell lines (target included)."""
    return ratios[target] - statistics.fmean(ratios.values())


def relative_dominance(ratios: Mapping[str, float], target: str) -> float:
    """Mean gap as a percentage of the mean ratio."""
    mean = statistics.fmean(ratios.values())
    if mean == 0:
        raise UndefinedMetric("mean agreement ratio is zero")
    return 100.0 * mean_gap(ratios, target) / mean


def mean_from_gap_and_dominance(gap: float, dominance_pct: float) -> float:
    """Invert dominance = 100 * gap / mean for the mean."""
    if dominance_pct == 0:
        raise UndefinedMetric("dominance of zero does not determine the mean")
    return 100.0 * gap / dominance_pct


@dataclass
class SpecificityReport:
    drug: str
    target_cell: str
    ratios: dict[str, float]
    target_rank: int
    mean_gap: float
    relative_dominance_pct: float | None
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def mean_ratio(self) -> float:
        return statistics.fmean(self.ratios.values())

    def identity_error(self) -> float:
        """|dominance - 100*gap/mean|; zero for a consistent report."""
        if self.relative_dominance_pct is None:
            return 0.0
        return abs(self.relative_dominance_pct - 100.0 * self.mean_gap / self.mean_ratio)

    def to_json(self) -> dict:
        return {
            "drug": self.drug,
            "target_cell": self.target_cell,
            "ratios": dict(sorted(self.ratios.items())),
            "n_genes": dict(sorted(self.counts.items())),
            "mean_ratio": self.mean_ratio,
            "target_rank": self.target_rank,
            "mean_gap": self.mean_gap,
            "relative_dominance_pct": self.relative_dominance_pct,
        }


def specificity_report(drug: str, ratios: Mapping[str, float], target: str, counts: Mapping[str, int] | None = None) -> SpecificityReport:
    ratios = dict(ratios)
    try:
        dom: float | None = relative_dominance(ratios, target)
    except UndefinedMetric:
        dom = None
    return SpecificityReport(drug, target, ratios, target_rank(ratios, target), mean_gap(ratios, target), dom, dict(counts or {}))


# -- category tables ---------------------------------------------------------


@dataclass
class CategoryResult:
    category: str
    per_run: dict[int, float]
    mean: float | None
    std: float | None
    n_records: int
    notes: list[str] = field(default_factory=list)


def _category_auroc(records: Sequence[dict], mode: str) -> float:
    if mode == "pooled":
        return auroc([r["score"] for r in records], [r["true_label"] for r in records])
    # per-perturbation: AUROC within each (cell, compound), then averaged
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    for r in records:
        groups[(r["cell_line"], r["compound"])].append(r)
    vals = []
    for key in sorted(groups):
        g = groups[key]
        try:
            vals.append(auroc([r["score"] for r in g], [r["true_label"] for r in g]))
        except UndefinedMetric:
            continue
    if not vals:
        raise UndefinedMetric("no perturbation with both classes")
    return statistics.fmean(vals)


def auroc_by_category(
    predictions: Iterable[dict],
    categories: Mapping[str, str],
    mode: str = "pooled",
    accepted_only: bool = False,
) -> list[CategoryResult]:
    """AUROC per category and run, then mean and std over runs.

    Runs where a category has a single class are dropped from that
    category's mean and noted.
    """
    if mode not in ("pooled", "per-perturbation"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    buckets: dict[str, dict[int, list[dict]]] = defaultdict(lambda: defaultdict(list))
    for p in predictions:
        if p.get("true_label") is None:
            continue
        if accepted_only and not p.get("verified", True):
            continue
        cat = categories.get(p["cell_line"], "uncategorized")
        buckets[cat][int(p.get("run_id", 0))].append(p)

    results = []
    for cat in sorted(buckets):
        per_run: dict[int, float] = {}
        notes = []
        for run in sorted(buckets[cat]):
            try:
                per_run[run] = _category_auroc(buckets[cat][run], mode)
            except UndefinedMetric as exc:
                notes.append(f"run {run}: undefined ({exc})")
        n = sum(len(v) for v in buckets[cat].values())
        if per_run:
            mean, std = aggregate_runs(list(per_run.values()))
            results.append(CategoryResult(cat, per_run, mean, std, n, notes))
        else:
            results.append(CategoryResult(cat, per_run, None, None, n, notes))
    return results


def agreement_by_cell(predictions: Iterable[dict], compound: str | None = None) -> tuple[dict[str, float], dict[str, int]]:
    """Agreement ratio per cell line, pooled over runs."""
    pred: dict[str, list[int]] = defaultdict(list)
    truth: dict[str, list[int]] = defaultdict(list)
    for p in predictions:
        if p.get("true_label") is None:
            continue
        if compound is not None and p["compound"] != compound:
            continue
        pred[p["cell_line"]].append(int(p["predicted_label"]))
        truth[p["cell_line"]].append(int(p["true_label"]))
    ratios = {c: agreement_ratio(pred[c], truth[c]) for c in sorted(pred)}
    return ratios, {c: len(pred[c]) for c in sorted(pred)}


def threshold_label(score: float, threshold: float = 0.5) -> int:
    """1 (up) when score >= threshold."""
    if math.isnan(score):
        raise ValueError("score is NaN")
    return 1 if score >= threshold else 0
