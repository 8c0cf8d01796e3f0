import itertools
import json
import statistics

import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import roc_auc_score

from pertreason import metrics, report
from pertreason.metrics import UndefinedMetric


def pairwise_auroc(scores, labels):
    """Enumerate every positive/negative pair; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_auroc_examples():
    assert metrics.auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert metrics.auroc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    scores = [0.1, 0.4, 0.35, 0.8, 0.65, 0.2, 0.9, 0.5, 0.5, 0.3]
    labels = [0, 0, 1, 1, 1, 0, 1, 0, 1, 0]
    assert metrics.auroc(scores, labels) == pairwise_auroc(scores, labels)


def test_auroc_single_class_undefined():
    with pytest.raises(UndefinedMetric):
        metrics.auroc([0.2, 0.3], [1, 1])


coarse = st.integers(0, 6).map(lambda k: k / 6)


@given(st.lists(st.tuples(coarse, st.integers(0, 1)), min_size=2, max_size=12).filter(lambda xs: len({y for _, y in xs}) == 2))
def test_auroc_equals_pairwise_oracle(rows):
    scores, labels = zip(*rows)
    assert metrics.auroc(scores, labels) == pairwise_auroc(scores, labels)
    assert metrics.auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


@given(st.lists(st.tuples(coarse, st.integers(0, 1)), min_size=2, max_size=12).filter(lambda xs: len({y for _, y in xs}) == 2))
def test_auroc_invariant_under_increasing_transform(rows):
    scores, labels = zip(*rows)
    moved = [3 * s**3 + 0.1 for s in scores]
    assert metrics.auroc(moved, labels) == metrics.auroc(scores, labels)


def test_aggregate_runs():
    assert metrics.aggregate_runs([0.6, 0.6, 0.6]) == (0.6, 0.0)
    assert metrics.aggregate_runs([0.7]) == (0.7, 0.0)
    mean, std = metrics.aggregate_runs([0.5, 0.6, 0.7])
    # by hand: deviations -0.1, 0, 0.1; sum of squares 0.02 over n-1 = 2
    assert mean == pytest.approx(0.6) and std == pytest.approx(0.1)


def test_agreement_ratio():
    assert metrics.agreement_ratio([1, 0, 1], [1, 0, 1]) == 1.0
    assert metrics.agreement_ratio([1, 0], [0, 1]) == 0.0
    pred = [1, 1, 0, 0, 1, 0, 1, 1, 0, 0]
    truth = [1, 1, 0, 0, 1, 0, 1, 0, 1, 1]
    assert metrics.agreement_ratio(pred, truth) == 0.7


# -- specificity ---------------------------------------------------------------


def test_target_rank():
    assert metrics.target_rank({"A375": 0.9, "HT29": 0.5, "MCF7": 0.4}, "A375") == 1
    assert metrics.target_rank({"A375": 0.5, "HT29": 0.5, "MCF7": 0.4}, "A375") == 1
    assert metrics.target_rank({"A375": 0.3, "HT29": 0.5, "MCF7": 0.4}, "A375") == 3


def test_equal_ratios():
    r = {c: 0.55 for c in ("A375", "HT29", "MCF7", "PC3")}
    assert metrics.mean_gap(r, "A375") == 0.0
    assert metrics.relative_dominance(r, "A375") == 0.0


def test_three_cell_fixture():
    r = {"A375": 0.8, "HT29": 0.4, "MCF7": 0.6}
    rep = metrics.specificity_report("vemurafenib", r, "A375")
    assert rep.mean_ratio == pytest.approx(0.6)
    assert rep.mean_gap == pytest.approx(0.2)
    assert rep.relative_dominance_pct == pytest.approx(100 / 3)
    assert rep.target_rank == 1


def test_zero_mean_dominance_undefined():
    with pytest.raises(UndefinedMetric):
        metrics.relative_dominance({"A": 0.0, "B": 0.0}, "A")
    rep = metrics.specificity_report("d", {"A": 0.0, "B": 0.0}, "A")
    assert rep.relative_dominance_pct is None and rep.identity_error() == 0.0


@pytest.mark.parametrize("gap, dom", [(0.177, 64.6), (0.161, 41.3)])
def test_reference_case_study_identity(gap, dom):
    mean = metrics.mean_from_gap_and_dominance(gap, dom)
    assert round(mean, 3) == pytest.approx(gap / (dom / 100), abs=5e-4)
    # six cell lines whose mean and target match the implied values
    target = gap + round(mean, 3)
    others = [round(mean, 3) - 0.05, round(mean, 3) - 0.1, round(mean, 3), round(mean, 3) + 0.02]
    last = 6 * round(mean, 3) - target - sum(others)
    ratios = dict(zip(["A375", "C1", "C2", "C3", "C4", "C5"], [target] + others + [last]))
    rep = metrics.specificity_report("drug", ratios, "A375")
    assert rep.target_rank == 1
    assert rep.mean_gap == pytest.approx(gap, abs=1e-9)
    assert abs(rep.relative_dominance_pct - dom) < 0.5
    assert rep.identity_error() <= 1e-9


ratio = st.integers(0, 100).map(lambda k: k / 100)


@given(st.lists(ratio, min_size=2, max_size=8), st.integers(-20, 20).map(lambda k: k / 100))
def test_shift_behaviour(values, c):
    r = {f"C{i}": v for i, v in enumerate(values)}
    shifted = {k: v + c for k, v in r.items()}
    assert metrics.target_rank(shifted, "C0") == metrics.target_rank(r, "C0")
    assert metrics.mean_gap(shifted, "C0") == pytest.approx(metrics.mean_gap(r, "C0"), abs=1e-12)
    rep = metrics.specificity_report("d", r, "C0")
    assert 1 <= rep.target_rank <= len(r)
    assert rep.identity_error() <= 1e-9


def test_dominance_not_shift_invariant():
    r = {"A": 0.8, "B": 0.4, "C": 0.6}
    s = {k: v + 0.2 for k, v in r.items()}
    assert metrics.relative_dominance(r, "A") != pytest.approx(metrics.relative_dominance(s, "A"))


# -- category tables -----------------------------------------------------------


def pred(cell, score, truth, run=0, cpd="x", verified=True):
    return {"cell_line": cell, "compound": cpd, "score": score, "true_label": truth, "predicted_label": int(score >= 0.5), "run_id": run, "verified": verified}


def test_auroc_by_category_pooled_and_runs():
    records = [
        pred("A375", 0.9, 1, 0), pred("A375", 0.1, 0, 0), pred("SKMEL5", 0.4, 1, 0), pred("SKMEL5", 0.6, 0, 0),
        pred("A375", 0.9, 1, 1), pred("A375", 0.1, 0, 1), pred("SKMEL5", 0.7, 1, 1), pred("SKMEL5", 0.6, 0, 1),
        pred("HT29", 0.7, 1, 0), pred("HT29", 0.6, 1, 0),
    ]
    cats = {"A375": "skin", "SKMEL5": "skin", "HT29": "colon"}
    res = {r.category: r for r in metrics.auroc_by_category(records, cats)}
    # skin run 0: pos {0.9, 0.4} vs neg {0.1, 0.6} -> 3/4; run 1: all pos above neg -> 1
    assert res["skin"].per_run == {0: 0.75, 1: 1.0}
    assert res["skin"].mean == 0.875 and res["skin"].std == pytest.approx(statistics.stdev([0.75, 1.0]))
    assert res["colon"].mean is None and "undefined" in res["colon"].notes[0]


def test_auroc_by_category_per_perturbation():
    records = [pred("A", 0.9, 1, cpd="d1"), pred("A", 0.1, 0, cpd="d1"), pred("A", 0.2, 1, cpd="d2"), pred("A", 0.8, 0, cpd="d2")]
    (pooled,) = metrics.auroc_by_category(records, {"A": "k"})
    (per,) = metrics.auroc_by_category(records, {"A": "k"}, mode="per-perturbation")
    # d1 separates perfectly, d2 is inverted; pooled pos {0.9, 0.2} vs neg {0.1, 0.8} wins 3 of 4 pairs
    assert per.mean == 0.5
    assert pooled.mean == 0.75
    records.append(pred("A", 0.3, 1, cpd="d1"))
    (per,) = metrics.auroc_by_category(records, {"A": "k"}, mode="per-perturbation")
    assert per.mean == pytest.approx((1.0 + 0.0) / 2)


def test_accepted_only_filter():
    records = [pred("A", 0.9, 1), pred("A", 0.1, 0), pred("A", 0.05, 1, verified=False)]
    (all_,) = metrics.auroc_by_category(records, {})
    (acc,) = metrics.auroc_by_category(records, {}, accepted_only=True)
    assert acc.mean == 1.0 and all_.mean == 0.5
    assert acc.n_records == 2


def test_threshold_label():
    assert metrics.threshold_label(0.5) == 1
    assert metrics.threshold_label(0.4999) == 0


def test_agreement_by_cell():
    records = [pred("A", 0.9, 1, cpd="v"), pred("A", 0.9, 0, cpd="v"), pred("B", 0.1, 0, cpd="v"), pred("B", 0.9, 1, cpd="w")]
    ratios, counts = metrics.agreement_by_cell(records, compound="v")
    assert ratios == {"A": 0.5, "B": 1.0} and counts == {"A": 2, "B": 1}


# -- report files --------------------------------------------------------------


def test_reports_write(tmp_path):
    res = metrics.auroc_by_category([pred("A", 0.9, 1), pred("A", 0.1, 0)], {"A": "skin"})
    text = report.auroc_table_text(res, "agent")
    assert "skin" in text and "1.00±0.00" in text
    report.write_auroc_tsv(res, tmp_path / "r.tsv")
    assert (tmp_path / "r.tsv").read_text().splitlines()[1].startswith("skin\t2\t1.000000")
    report.plot_auroc(res, tmp_path / "r.png")
    assert (tmp_path / "r.png").read_bytes()[:4] == b"\x89PNG"
    doc = report.auroc_report_json(res, "pooled", False)
    assert json.loads(json.dumps(doc))["categories"][0]["mean"] == 1.0

    rep = metrics.specificity_report("vemurafenib", {"A375": 0.8, "HT29": 0.4, "MCF7": 0.6}, "A375", {"A375": 10, "HT29": 10, "MCF7": 10})
    assert "33.3" in report.specificity_text([rep])
    report.write_specificity_tsv([rep], tmp_path / "s.tsv")
    assert len((tmp_path / "s.tsv").read_text().splitlines()) == 4
    report.plot_specificity([rep], tmp_path / "s.png")
    assert (tmp_path / "s.png").stat().st_size > 0
