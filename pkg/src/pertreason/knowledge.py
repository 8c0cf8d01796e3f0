"""Biological relatedness from a STRING-style interaction source.

Scores come from an offline snapshot (``string_edges.tsv``), optionally
backed by a live HTTP endpoint. Combined scores on the 0-1000 scale are
divided by 1000. MoA relatedness is the max (or mean) of gene-gene scores
between the MoA's target genes and the query gene.
"""

from __future__ import annotations

import csv
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import httpx

log = logging.getLogger(__name__)

SCORE_SCALE = 1000.0

LIVE, SNAPSHOT, ABSENT = "live_api", "snapshot", "absent"


class ProviderUnavailable(RuntimeError):
    def __init__(self, detail: str = ""):
        super().__init__("provider unavailable" + (f": {detail}" if detail else ""))


class UnmappedMoA(KeyError):
    pass


@dataclass(frozen=True)
class RelatednessScore:
    source_gene: str
    query_gene: str
    score: float
    provenance: str


def _key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


# -- snapshot file -----------------------------------------------------------


def write_snapshot(edges: Mapping[tuple[str, str], float], path: Path) -> None:
    """Write undirected edges (raw 0-1000 scores) sorted by gene pair."""
    merged: dict[tuple[str, str], float] = {}
    for (a, b), s in edges.items():
        k = _key(a, b)
        merged[k] = max(s, merged.get(k, s))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["geneA", "geneB", "combined_score"])
        for (a, b) in sorted(merged):
            s = merged[(a, b)]
            w.writerow([a, b, int(s) if float(s).is_integer() else repr(float(s))])


def read_snapshot(path: Path) -> dict[tuple[str, str], float]:
    """Read ``string_edges.tsv``; duplicate pairs keep the highest score."""
    edges: dict[tuple[str, str], float] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            k = _key(row["geneA"].strip(), row["geneB"].strip())
            s = float(row["combined_score"])
            if not 0 <= s <= SCORE_SCALE:
                raise ValueError(f"combined_score out of range for {k}: {s}")
            edges[k] = max(s, edges.get(k, s))
    return edges


def read_moa_targets(path: Path) -> dict[str, list[str]]:
    """``moa<TAB>gene`` rows -> MoA -> ordered target list."""
    out: dict[str, list[str]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            moa, gene = row["moa"].strip(), row["gene"].strip()
            if moa and gene and gene not in out.setdefault(moa, []):
                out[moa].append(gene)
    return out


# -- sources -----------------------------------------------------------------


class LiveStringSource:
    """HTTP source returning TSV interaction rows for a pair of identifiers."""

    def __init__(
        self,
        base_url: str = "https://string-db.org/api",
        species: int = 9606,
        timeout: float = 10.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.species = species
        self._client = client or httpx.Client(timeout=timeout)

    def fetch(self, a: str, b: str) -> float | None:
        """Raw 0-1000 combined score for (a, b), or None when no edge exists."""
        params = {"identifiers": f"{a}\r{b}", "species": self.species, "caller_identity": "pertreason"}
        try:
            resp = self._client.get(f"{self.base_url}/tsv/network", params=params)
        except httpx.HTTPError as exc:
            raise ProviderUnavailable(str(exc)) from exc
        if resp.status_code != 200:
            raise ProviderUnavailable(f"HTTP {resp.status_code}")
        return _parse_network_tsv(resp.text, a, b)


def _parse_network_tsv(text: str, a: str, b: str) -> float | None:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return None
    header = lines[0].split("\t")
    names = [c for c in ("preferredName_A", "preferredName_B") if c in header]
    ia, ib = (header.index(names[0]), header.index(names[1])) if len(names) == 2 else (0, 1)
    score_col = next((c for c in ("combined_score", "score") if c in header), header[-1])
    isc = header.index(score_col)
    best = None
    for ln in lines[1:]:
        cols = ln.split("\t")
        if _key(cols[ia], cols[ib]) != _key(a, b):
            continue
        s = float(cols[isc])
        # STRING's json/tsv API reports 0-1, the bulk files 0-1000
        s = s * SCORE_SCALE if s <= 1.0 else s
        best = s if best is None else max(best, s)
    return best


class InteractionProvider:
    """Gene-gene and MoA-gene relatedness with a thread-safe cache.

    Snapshot edges are consulted first; pairs missing from the snapshot are
    looked up live when a live source is configured.
    """

    def __init__(
        self,
        snapshot: Mapping[tuple[str, str], float] | None = None,
        live: LiveStringSource | None = None,
        moa_targets: Mapping[str, Iterable[str]] | None = None,
        aggregate: str = "max",
        strict: bool = False,
    ):
        if aggregate not in ("max", "mean"):
            raise ValueError(f"aggregate must be 'max' or 'mean', got {aggregate!r}")
        if snapshot is None and live is None:
            raise ProviderUnavailable("no snapshot loaded and no live source configured")
        self._edges = {_key(a, b): float(s) for (a, b), s in (snapshot or {}).items()}
        self._has_snapshot = snapshot is not None
        self._live = live
        self.moa_targets = {m: list(t) for m, t in (moa_targets or {}).items()}
        self.aggregate = aggregate
        self.strict = strict
        self._cache: dict[tuple[str, str], RelatednessScore] = {}
        self._lock = threading.Lock()

    def gene_gene(self, g1: str, g2: str) -> RelatednessScore:
        if g1 == g2:
            return RelatednessScore(g1, g2, 1.0, SNAPSHOT)
        k = _key(g1, g2)
        with self._lock:
            hit = self._cache.get(k)
        if hit is None:
            hit = self._lookup(k)
            with self._lock:
                hit = self._cache.setdefault(k, hit)
        return RelatednessScore(g1, g2, hit.score, hit.provenance)

    def _lookup(self, k: tuple[str, str]) -> RelatednessScore:
        if k in self._edges:
            return RelatednessScore(k[0], k[1], self._edges[k] / SCORE_SCALE, SNAPSHOT)
        if self._live is not None:
            try:
                raw = self._live.fetch(*k)
            except ProviderUnavailable:
                if not self._has_snapshot:
                    raise
                log.warning("live lookup failed for %s; treating as absent", k)
                raw = None
            if raw is not None:
                return RelatednessScore(k[0], k[1], min(raw, SCORE_SCALE) / SCORE_SCALE, LIVE)
        return RelatednessScore(k[0], k[1], 0.0, ABSENT)

    def targets(self, moa: str) -> list[str]:
        """Target genes for an MoA; several ';'-joined MoAs pool their targets."""
        out: list[str] = []
        for part in [moa] + [p.strip() for p in moa.split(";")]:
            for g in self.moa_targets.get(part, []):
                if g not in out:
                    out.append(g)
        return out

    def relatedness(self, moa: str, gene: str) -> RelatednessScore:
        targets = self.targets(moa)
        if not targets:
            if self.strict:
                raise UnmappedMoA(moa)
            return RelatednessScore(moa, gene, 0.0, ABSENT)
        scores = [self.gene_gene(t, gene) for t in targets]
        if self.aggregate == "max":
            best = max(scores, key=lambda s: s.score)
            return RelatednessScore(best.source_gene, gene, best.score, best.provenance)
        mean = sum(s.score for s in scores) / len(scores)
        prov = ABSENT if mean == 0 else next(s.provenance for s in scores if s.score > 0)
        return RelatednessScore(moa, gene, mean, prov)
