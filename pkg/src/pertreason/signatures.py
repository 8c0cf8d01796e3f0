"""Consensus signatures and benchmark query construction.

Per-condition z-score signatures are quality filtered, aggregated per
(cell line, compound) pair into directionally consistent consensus genes,
and the strongest genes in each direction become binary benchmark queries.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

log = logging.getLogger(__name__)

UP, DOWN = "up", "down"
LABEL_CODE = {UP: 1, DOWN: 0}

# LINCS pert_type codes mapped onto our coarse perturbation classes.
_PERT_TYPES = {
    "trt_cp": "compound",
    "compound": "compound",
    "trt_sh": "genetic",
    "trt_oe": "genetic",
    "trt_xpr": "genetic",
    "trt_sh.cgs": "genetic",
    "genetic": "genetic",
}


class SignatureError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionSignature:
    condition_id: str
    cell_line: str
    compound: str
    replicate_count: int
    gene_z: dict[str, float]
    quality_flags: frozenset[str] = frozenset()
    perturbation_type: str = "compound"
    dose: float | None = None
    time_h: float | None = None

    def problems(self) -> list[str]:
        """Return the invariant violations of this row (empty when valid)."""
        out = []
        if not self.condition_id:
            out.append("empty condition_id")
        if not self.cell_line or not self.compound:
            out.append("missing cell_line or compound")
        if not isinstance(self.replicate_count, int) or self.replicate_count < 1:
            out.append(f"replicate_count must be >= 1, got {self.replicate_count!r}")
        bad = [g for g, z in self.gene_z.items() if not math.isfinite(z)]
        if bad:
            out.append(f"non-finite z for {', '.join(sorted(bad)[:5])}")
        return out


@dataclass(frozen=True)
class QualityPolicy:
    required_flags: frozenset[str] = frozenset({"high_quality", "qc_pass"})
    perturbation_type: str = "compound"
    require_moa: bool = True


@dataclass(frozen=True)
class ConsensusRecord:
    gene: str
    n_up: int
    n_down: int
    n_total: int
    consistency: float
    consensus_z: float

    @property
    def direction(self) -> str:
        return UP if self.consensus_z > 0 else DOWN


@dataclass(frozen=True)
class BenchmarkItem:
    cell_line: str
    compound: str
    moa: str
    gene: str
    label: int
    consensus_z: float
    consistency: float
    split: str = "test"

    def to_json(self) -> dict:
        return {
            "cell_line": self.cell_line,
            "compound": self.compound,
            "moa": self.moa,
            "gene": self.gene,
            "label": self.label,
            "consensus_z": self.consensus_z,
            "consistency": self.consistency,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BenchmarkItem":
        label = obj["label"]
        if isinstance(label, str):
            label = 1 if label.strip().lower().startswith("up") else 0
        return cls(
            cell_line=obj["cell_line"],
            compound=obj["compound"],
            moa=obj["moa"],
            gene=obj["gene"],
            label=int(label),
            consensus_z=float(obj["consensus_z"]),
            consistency=float(obj["consistency"]),
            split=obj.get("split", "test"),
        )


@dataclass
class Selection:
    """Outcome of query selection for one (cell line, compound) pair."""

    items: list[BenchmarkItem] = field(default_factory=list)
    rejected: str | None = None


# -- core formulas -----------------------------------------------------------


def directional_consistency(zs: Sequence[float]) -> tuple[int, int, int, float]:
    """Count up/down conditions and return ``(n_up, n_down, n_total, consistency)``.

    A z of exactly zero counts toward the total but toward neither direction.
    """
    if len(zs) == 0:
        raise SignatureError("no conditions")
    n_up = sum(1 for z in zs if z > 0)
    n_down = sum(1 for z in zs if z < 0)
    n_total = len(zs)
    return n_up, n_down, n_total, max(n_up, n_down) / n_total


def consensus_z(zs: Sequence[float], weights: Sequence[int]) -> float:
    """Replicate-weighted mean of per-condition z-scores."""
    if len(zs) != len(weights):
        raise SignatureError(f"length mismatch: {len(zs)} z-scores vs {len(weights)} weights")
    if len(zs) == 0:
        raise SignatureError("no conditions")
    if any(w <= 0 for w in weights):
        raise SignatureError("weights must be positive")
    # fsum keeps the result independent of condition order
    total = math.fsum(w * z for w, z in zip(weights, zs))
    return total / math.fsum(weights)


def filter_signatures(
    raw: Iterable[ConditionSignature],
    policy: QualityPolicy = QualityPolicy(),
    moa_of: dict[str, str] | None = None,
    diagnostics: list[str] | None = None,
) -> list[ConditionSignature]:
    """Keep compound signatures carrying every required quality flag.

    When ``policy.require_moa`` is set and ``moa_of`` is given, compounds
    without a non-empty MoA annotation are dropped too. Rows violating the
    signature invariants are rejected and described in ``diagnostics``.
    """
    kept = []
    seen: set[str] = set()
    for sig in raw:
        problems = sig.problems()
        if sig.condition_id in seen:
            problems.append("duplicate condition_id")
        if problems:
            msg = f"{sig.condition_id or '<blank>'}: {'; '.join(problems)}"
            log.warning("rejected signature %s", msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        seen.add(sig.condition_id)
        if sig.perturbation_type != policy.perturbation_type:
            continue
        if not policy.required_flags <= sig.quality_flags:
            continue
        if policy.require_moa and moa_of is not None and not moa_of.get(sig.compound, "").strip():
            continue
        kept.append(sig)
    return kept


def build_consensus(conds: Sequence[ConditionSignature], threshold: float = 0.7) -> list[ConsensusRecord]:
    """Per-gene consensus for one (cell line, compound) pair.

    Genes whose directional consistency is at least ``threshold`` are kept.
    Each signature row counts as one condition; a gene absent from a row is
    simply not measured there. Records come back sorted by gene symbol.
    """
    pairs = {(c.cell_line, c.compound) for c in conds}
    if len(pairs) > 1:
        raise SignatureError(f"conditions span several (cell, compound) pairs: {sorted(pairs)}")
    per_gene: dict[str, list[tuple[float, int]]] = defaultdict(list)
    for c in conds:
        for gene, z in c.gene_z.items():
            per_gene[gene].append((z, c.replicate_count))

    records = []
    for gene in sorted(per_gene):
        obs = per_gene[gene]
        zs = [z for z, _ in obs]
        n_up, n_down, n_total, _ = directional_consistency(zs)
        # exact rational comparison so 7/10 passes a 0.7 threshold
        if Fraction(max(n_up, n_down), n_total) < Fraction(str(threshold)):
            continue
        cz = consensus_z(zs, [w for _, w in obs])
        records.append(ConsensusRecord(gene, n_up, n_down, n_total, max(n_up, n_down) / n_total, cz))
    return records


def _pass_through(moa: str, gene: str, direction: str) -> bool:
    return True


def select_query_genes(
    records: Sequence[ConsensusRecord],
    cell_line: str,
    compound: str,
    moa: str,
    per_direction: int = 10,
    min_consistent: int = 40,
    plausibility: Callable[[str, str, str], bool] | None = None,
    split: str = "test",
) -> Selection:
    """Pick up to ``per_direction`` strongest genes per direction as queries.

    Pairs with fewer than ``min_consistent`` consensus genes are rejected.
    Ranking is by |consensus z| descending with ties broken by gene symbol.
    ``plausibility(moa, gene, direction)`` may veto genes; by default every
    gene passes.
    """
    if not moa.strip():
        return Selection(rejected="missing MoA annotation")
    if len(records) < min_consistent:
        return Selection(rejected=f"only {len(records)} consistent genes (< {min_consistent})")
    keep = plausibility or _pass_through
    ranked = sorted(records, key=lambda r: (-abs(r.consensus_z), r.gene))
    taken = {UP: 0, DOWN: 0}
    items = []
    for rec in ranked:
        direction = rec.direction
        if rec.consensus_z == 0 or taken[direction] >= per_direction:
            continue
        if not keep(moa, rec.gene, direction):
            continue
        taken[direction] += 1
        items.append(
            BenchmarkItem(
                cell_line=cell_line,
                compound=compound,
                moa=moa,
                gene=rec.gene,
                label=LABEL_CODE[direction],
                consensus_z=rec.consensus_z,
                consistency=rec.consistency,
                split=split,
            )
        )
    if not items:
        return Selection(rejected="no gene passed the plausibility filter")
    return Selection(items=items)


def assign_split(cell_line: str, compound: str, test_fraction: float = 0.25) -> str:
    """Deterministic pair-level train/test split from a hash of the pair."""
    digest = hashlib.sha256(f"{cell_line}\t{compound}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    return "test" if u < test_fraction else "train"


@dataclass
class BenchmarkBuild:
    items: list[BenchmarkItem]
    rejected: list[tuple[str, str, str]]
    diagnostics: list[str]


def build_benchmark(
    signatures: Sequence[ConditionSignature],
    moa_of: dict[str, str],
    threshold: float = 0.7,
    per_direction: int = 10,
    min_consistent: int = 40,
    pairs: dict[tuple[str, str], str | None] | None = None,
    test_fraction: float = 0.25,
    policy: QualityPolicy = QualityPolicy(),
    plausibility: Callable[[str, str, str], bool] | None = None,
) -> BenchmarkBuild:
    """Run filter -> consensus -> selection over every (cell, compound) pair.

    ``pairs`` optionally restricts the build to a curated pair list; a
    non-None value for a pair pins its split.
    """
    diagnostics: list[str] = []
    kept = filter_signatures(signatures, policy, moa_of, diagnostics)
    groups: dict[tuple[str, str], list[ConditionSignature]] = defaultdict(list)
    for sig in kept:
        groups[(sig.cell_line, sig.compound)].append(sig)

    wanted = sorted(pairs) if pairs is not None else sorted(groups)
    items: list[BenchmarkItem] = []
    rejected: list[tuple[str, str, str]] = []
    for cell, cpd in wanted:
        conds = groups.get((cell, cpd))
        if not conds:
            rejected.append((cell, cpd, "no qualifying signatures"))
            continue
        split = (pairs or {}).get((cell, cpd)) or assign_split(cell, cpd, test_fraction)
        sel = select_query_genes(
            build_consensus(conds, threshold),
            cell,
            cpd,
            moa_of.get(cpd, ""),
            per_direction=per_direction,
            min_consistent=min_consistent,
            plausibility=plausibility,
            split=split,
        )
        if sel.rejected:
            rejected.append((cell, cpd, sel.rejected))
        items.extend(sel.items)
    return BenchmarkBuild(items, rejected, diagnostics)


# -- TSV input ---------------------------------------------------------------


def _opt_float(text: str) -> float | None:
    text = text.strip()
    if text in ("", "NA", "nan", "-666"):
        return None
    return float(text)


def _flag(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "t", "yes")


def read_signatures(conditions: Path, zscores: Path, diagnostics: list[str] | None = None) -> list[ConditionSignature]:
    """Load ``conditions.tsv`` + long-form ``zscores.tsv`` into signatures.

    Rows that cannot be parsed are skipped and reported in ``diagnostics``.
    """
    diag = diagnostics if diagnostics is not None else []
    gene_z: dict[str, dict[str, float]] = defaultdict(dict)
    with open(zscores, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh, delimiter="\t"), start=2):
            try:
                gene_z[row["condition_id"]][row["gene"]] = float(row["z"])
            except (KeyError, TypeError, ValueError) as exc:
                diag.append(f"{zscores.name}:{lineno}: unparseable z row ({exc})")

    out = []
    with open(conditions, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh, delimiter="\t"), start=2):
            try:
                flags = set()
                if _flag(row["is_hiq"]):
                    flags.add("high_quality")
                if _flag(row["qc_pass"]):
                    flags.add("qc_pass")
                pert = row["pert_type"].strip()
                cid = row["condition_id"].strip()
                out.append(
                    ConditionSignature(
                        condition_id=cid,
                        cell_line=row["cell_line"].strip(),
                        compound=row["compound"].strip(),
                        replicate_count=int(row["replicate_count"]),
                        gene_z=gene_z.get(cid, {}),
                        quality_flags=frozenset(flags),
                        perturbation_type=_PERT_TYPES.get(pert, "other"),
                        dose=_opt_float(row.get("dose_um", "")),
                        time_h=_opt_float(row.get("time_h", "")),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                diag.append(f"{conditions.name}:{lineno}: malformed condition row ({exc})")
    return out


def read_moa_annotations(path: Path) -> dict[str, str]:
    """``compound<TAB>moa`` rows; several MoAs for one compound are joined with '; '."""
    moas: dict[str, list[str]] = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            moa = (row.get("moa") or "").strip()
            if moa and moa not in moas[row["compound"].strip()]:
                moas[row["compound"].strip()].append(moa)
    return {cpd: "; ".join(v) for cpd, v in moas.items()}


def read_pairs(path: Path) -> dict[tuple[str, str], str | None]:
    """Curated ``cell_line<TAB>compound[<TAB>split]`` list."""
    out: dict[tuple[str, str], str | None] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            split = (row.get("split") or "").strip() or None
            if split not in (None, "train", "test"):
                raise SignatureError(f"bad split {split!r} in {path}")
            out[(row["cell_line"].strip(), row["compound"].strip())] = split
    return out
