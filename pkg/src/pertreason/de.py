"""Pseudobulk differential expression labels (treated vs. untreated).

Per gene, a two-sided Mann-Whitney U test over per-cell expression is
followed by Benjamini-Hochberg adjustment; a gene is called up or down when
it is significant and its pseudobulk log2 fold change is large enough.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Mapping, Sequence

from scipy.stats import norm, rankdata

log = logging.getLogger(__name__)

# Above this many pooled observations the exact null is replaced by the
# tie-corrected normal approximation.
EXACT_MAX_N = 50


@dataclass(frozen=True)
class PseudobulkMatrix:
    cell_line: str
    time_h: float
    gene_counts: dict[str, float]
    n_cells: int

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        for g, c in self.gene_counts.items():
            if not math.isfinite(c) or c < 0:
                raise ValueError(f"count for {g} must be finite and non-negative, got {c}")

    def mean_count(self, gene: str) -> float:
        return self.gene_counts.get(gene, 0.0) / self.n_cells


@dataclass(frozen=True)
class GeneDE:
    gene: str
    u: float
    p: float
    q: float
    log2fc: float
    label: str


def mann_whitney_u(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test; returns ``(U_x, p)``.

    ``U_x`` counts pairs with x > y plus half of the ties. Small samples use
    the exact permutation null over midranks, so ties are handled exactly.
    """
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples need at least one observation")
    ranks = rankdata(list(x) + list(y))
    # doubled midranks are integers
    r2 = [int(round(2 * r)) for r in ranks]
    obs_r2 = sum(r2[:n1])
    u2 = obs_r2 - n1 * (n1 + 1)  # 2 * U_x
    u = u2 / 2
    if n1 + n2 <= EXACT_MAX_N:
        return u, _exact_p(r2, n1, n2, u2)
    return u, _normal_p(ranks, n1, n2, u)


def _exact_p(r2: list[int], n1: int, n2: int, u2_obs: int) -> float:
    # counts[k][s]: number of size-k subsets whose doubled rank sum is s
    counts: list[dict[int, int]] = [dict() for _ in range(n1 + 1)]
    counts[0][0] = 1
    for i, r in enumerate(r2):
        for k in range(min(i + 1, n1), 0, -1):
            prev = counts[k - 1]
            cur = counts[k]
            for s, c in prev.items():
                cur[s + r] = cur.get(s + r, 0) + c
    center = n1 * n2  # 2 * E[U]
    obs_dev = abs(u2_obs - center)
    base = n1 * (n1 + 1)
    extreme = sum(c for s, c in counts[n1].items() if abs(s - base - center) >= obs_dev)
    return min(1.0, extreme / comb(n1 + n2, n1))


def _normal_p(ranks, n1: int, n2: int, u: float) -> float:
    n = n1 + n2
    tie_counts = _tie_sizes(ranks)
    tie_term = sum(t**3 - t for t in tie_counts) / (n * (n - 1))
    var = n1 * n2 / 12 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = (abs(u - n1 * n2 / 2) - 0.5) / math.sqrt(var)
    return float(min(1.0, 2 * norm.sf(max(z, 0.0))))


def _tie_sizes(ranks) -> list[int]:
    groups: dict[float, int] = defaultdict(int)
    for r in ranks:
        groups[float(r)] += 1
    return [c for c in groups.values() if c > 1]


def benjamini_hochberg(pvalues: Sequence[float]) -> list[float]:
    """Step-up BH adjusted q-values, in input order."""
    m = len(pvalues)
    if m == 0:
        return []
    order = sorted(range(m), key=lambda i: pvalues[i])
    q = [0.0] * m
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, pvalues[i] * m / rank)
        q[i] = running
    return q


def log2_fold_change(treated: PseudobulkMatrix, control: PseudobulkMatrix, gene: str, pseudocount: float = 1.0) -> float:
    return math.log2((treated.mean_count(gene) + pseudocount) / (control.mean_count(gene) + pseudocount))


def differential_expression(
    treated: PseudobulkMatrix,
    control: PseudobulkMatrix,
    cells_treated: Mapping[str, Sequence[float]],
    cells_control: Mapping[str, Sequence[float]],
    fdr: float = 0.05,
    lfc: float = 0.5,
    diagnostics: list[str] | None = None,
) -> list[GeneDE]:
    """Test every gene measured on both sides; results sorted by gene."""
    tested = []
    for gene in sorted(set(cells_treated) & set(cells_control)):
        xt, xc = cells_treated[gene], cells_control[gene]
        if len(xt) < 2 or len(xc) < 2:
            msg = f"{gene}: skipped, needs >= 2 cells per side (got {len(xt)} vs {len(xc)})"
            log.info(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        u, p = mann_whitney_u(xt, xc)
        tested.append((gene, u, p))

    qs = benjamini_hochberg([p for _, _, p in tested])
    out = []
    for (gene, u, p), q in zip(tested, qs):
        fc = log2_fold_change(treated, control, gene)
        label = "unchanged"
        if q < fdr and abs(fc) > lfc:
            label = "up" if fc > 0 else "down"
        out.append(GeneDE(gene, u, p, q, fc, label))
    return out


def label_pseudobulk_de(
    treated: PseudobulkMatrix,
    control: PseudobulkMatrix,
    cells_treated: Mapping[str, Sequence[float]],
    cells_control: Mapping[str, Sequence[float]],
    fdr: float = 0.05,
    lfc: float = 0.5,
) -> dict[str, str]:
    """Map gene -> ``up`` / ``down`` / ``unchanged``."""
    rows = differential_expression(treated, control, cells_treated, cells_control, fdr, lfc)
    return {r.gene: r.label for r in rows}


# -- file input --------------------------------------------------------------


def read_pseudobulk(path: Path) -> dict[tuple[str, float], PseudobulkMatrix]:
    """``cell_line, time_h, n_cells, gene, count`` long-form rows."""
    counts: dict[tuple[str, float], dict[str, float]] = defaultdict(dict)
    ncells: dict[tuple[str, float], int] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            key = (row["cell_line"].strip(), float(row["time_h"]))
            counts[key][row["gene"].strip()] = float(row["count"])
            ncells[key] = int(row["n_cells"])
    return {k: PseudobulkMatrix(k[0], k[1], counts[k], ncells[k]) for k in counts}


def read_cells(path: Path) -> dict[tuple[str, float], dict[str, list[float]]]:
    """``cell_line, time_h, cell_id, gene, value`` long-form rows, grouped per gene."""
    out: dict[tuple[str, float], dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    with open(path, newline="") as fh:
        rows = sorted(csv.DictReader(fh, delimiter="\t"), key=lambda r: (r["cell_line"], float(r["time_h"]), r["cell_id"]))
    for row in rows:
        key = (row["cell_line"].strip(), float(row["time_h"]))
        out[key][row["gene"].strip()].append(float(row["value"]))
    return {k: dict(v) for k, v in out.items()}
