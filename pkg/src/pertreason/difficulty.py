"""Difficulty-aware ordering of samples within each (cell line, compound) context.

A sample's composite score is the product of the probe model's
self-consistency and the MoA-gene relatedness. Higher composite means
easier, so samples are processed in descending composite order.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import jsonout, prompts
from .gateway import CallSettings, ask
from .knowledge import InteractionProvider
from .samples import Query, Sample, derive_seed

log = logging.getLogger(__name__)

INVALID = "invalid"


@dataclass(frozen=True)
class DifficultyScore:
    sample: Sample
    consistency: float
    relatedness: float
    votes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def composite(self) -> float:
        return self.consistency * self.relatedness

    def to_json(self) -> dict:
        s = self.sample
        return {
            "cell_line": s.cell_line,
            "compound": s.compound,
            "moa": s.moa,
            "gene": s.gene,
            "consistency": self.consistency,
            "relatedness": self.relatedness,
            "composite": self.composite,
            "votes": list(self.votes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DifficultyScore":
        sample = Sample(obj["cell_line"], obj["compound"], obj["moa"], obj["gene"])
        return cls(sample, float(obj["consistency"]), float(obj["relatedness"]), tuple(obj.get("votes", ())))


def vote_share(votes: Sequence[str]) -> float:
    """Max(up, down) / number of trials; invalid votes only widen the denominator."""
    if not votes:
        raise ValueError("trials must be >= 1")
    up = sum(1 for v in votes if v == "up")
    down = sum(1 for v in votes if v == "down")
    return max(up, down) / len(votes)


def probe_self_consistency(
    query: Query,
    backend,
    trials: int = 5,
    root_seed: int = 0,
    settings: CallSettings = CallSettings(),
) -> tuple[float, list[str]]:
    """Ask the probe question ``trials`` times with distinct seeds."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    messages = prompts.load("probe").fill(
        cell_line=query.cell_line, target_gene=query.gene, pert_or_moa=query.perturbation
    )
    votes = []
    for t in range(trials):
        seed = derive_seed(root_seed, "probe", query.context_id, query.gene, t)
        text = ask(backend, messages, seed, settings)
        try:
            answer = jsonout.extract_json(text, jsonout.PROBE)["answer"]
            votes.append("up" if answer == "upregulated" else "down")
        except jsonout.MalformedAgentOutput:
            votes.append(INVALID)
    if all(v == INVALID for v in votes):
        log.warning("all %d probe trials unparseable for %s/%s", trials, query.context_id, query.gene)
    return vote_share(votes), votes


def score(
    sample: Sample,
    provider: InteractionProvider,
    backend,
    trials: int = 5,
    root_seed: int = 0,
    settings: CallSettings = CallSettings(),
) -> DifficultyScore:
    q = sample.query
    consistency, votes = probe_self_consistency(q, backend, trials, root_seed, settings)
    related = provider.relatedness(q.moa, q.gene).score
    bare = Sample(q.cell_line, q.compound, q.moa, q.gene)
    return DifficultyScore(bare, consistency, related, tuple(votes))


def sort_easy_first(scores: Iterable[DifficultyScore]) -> list[DifficultyScore]:
    """Descending composite; equal composites in gene-symbol order."""
    return sorted(scores, key=lambda d: (-d.composite, d.sample.gene))


def schedule(
    samples: Sequence[Sample],
    provider: InteractionProvider,
    backend,
    trials: int = 5,
    root_seed: int = 0,
    settings: CallSettings = CallSettings(),
    workers: int = 1,
) -> list[DifficultyScore]:
    """Score every sample and sort easy-first within each context.

    Contexts come out in context-id order, so the result does not depend on
    input order or on ``workers``.
    """
    def one(s: Sample) -> DifficultyScore:
        return score(s, provider, backend, trials, root_seed, settings)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(one, samples))
    else:
        scored = [one(s) for s in samples]
    by_ctx: dict[str, list[DifficultyScore]] = defaultdict(list)
    for d in scored:
        by_ctx[d.sample.context_id].append(d)
    out = []
    for ctx in sorted(by_ctx):
        out.extend(sort_easy_first(by_ctx[ctx]))
    return out


def write_scores(scores: Iterable[DifficultyScore], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in scores:
            fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")


def read_scores(path: Path) -> list[DifficultyScore]:
    with open(path, encoding="utf-8") as fh:
        return [DifficultyScore.from_json(json.loads(line)) for line in fh if line.strip()]
