"""Easy-to-hard progressive loop over each (cell line, compound) context.

Within a context, samples run strictly in scheduler order and each accepted
prediction becomes a history entry that later (harder) samples may see.
Only predictions and reasoning summaries enter history, never labels.
Contexts are independent and may run in parallel; each persists a
checkpoint after every sample so an interrupted run can resume.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .agents import Ensemble, NeuralPrior, Prediction
from .difficulty import DifficultyScore
from .gateway import ChatRequest, GatewayError
from .knowledge import InteractionProvider, ProviderUnavailable
from .samples import Query, answer_to_label

log = logging.getLogger(__name__)

SUMMARY_CAP = 600


class RunFailure(RuntimeError):
    def __init__(self, context_id: str, cause: Exception):
        super().__init__(f"context {context_id} failed: {cause}")
        self.context_id = context_id
        self.cause = cause


class ResumeRefused(RuntimeError):
    pass


@dataclass(frozen=True)
class HistoryEntry:
    gene: str
    answer: str
    summary: str
    composite: float
    verified: bool


@dataclass(frozen=True)
class EngineConfig:
    history_cap: int = 5
    summary_cap: int = SUMMARY_CAP
    verified_only: bool = True


def render_history(entries: Sequence[HistoryEntry]) -> str:
    return "\n".join(f"- {e.gene}: predicted {e.answer}; {e.summary}" for e in entries)


def curate_history(
    entries: Sequence[HistoryEntry],
    current_gene: str,
    cap: int,
    provider: InteractionProvider,
    verified_only: bool = True,
) -> list[HistoryEntry]:
    """Up to ``cap`` entries most related to ``current_gene``; ties favour newer entries."""
    if cap <= 0:
        return []
    eligible = [(i, e) for i, e in enumerate(entries) if e.verified or not verified_only]
    ranked = sorted(eligible, key=lambda ie: (-provider.gene_gene(ie[1].gene, current_gene).score, -ie[0]))
    return [e for _, e in ranked[:cap]]


def _summary(text: str, cap: int) -> str:
    flat = " ".join(text.split())
    return flat[:cap]


def trace_record(order: int, score: DifficultyScore, pred: Prediction, history: Sequence[HistoryEntry], run_id: int) -> dict:
    s = score.sample
    return {
        "run_id": run_id,
        "context_id": s.context_id,
        "order": order,
        "cell_line": s.cell_line,
        "compound": s.compound,
        "moa": s.moa,
        "gene": s.gene,
        "composite": score.composite,
        "history_genes": [h.gene for h in history],
        "experts": [e.to_json() for e in pred.experts],
        "prior": asdict(pred.prior) if pred.prior else None,
        "draws": [d.to_json() for d in pred.draws],
        "score": pred.score,
        "answer": pred.answer,
        "verified": pred.verified,
        "reasoning": pred.reasoning,
    }


def _history_from_trace(t: dict, cap: int) -> HistoryEntry:
    return HistoryEntry(t["gene"], t["answer"], _summary(t["reasoning"], cap), t["composite"], t["verified"])


# -- checkpoints -------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class RunState:
    context_id: str
    pending: list[dict]
    completed: list[dict]
    rng_seed: int
    config_hash: str

    def save(self, path: Path) -> None:
        _atomic_write(path, json.dumps(asdict(self), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: Path) -> "RunState":
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def resume(state_file: Path, config_hash: str) -> RunState:
    state = RunState.load(state_file)
    if state.config_hash != config_hash:
        raise ResumeRefused(
            f"{state_file}: checkpoint was written under config {state.config_hash[:12]}, current is {config_hash[:12]}"
        )
    return state


# -- the loop ----------------------------------------------------------------


PriorFn = Callable[[Query], "NeuralPrior | None"]


def run_context(
    scores: Sequence[DifficultyScore],
    ensemble: Ensemble,
    provider: InteractionProvider,
    config: EngineConfig = EngineConfig(),
    state_dir: Path | None = None,
    config_hash: str = "",
    run_id: int = 0,
    priors: PriorFn | None = None,
) -> list[dict]:
    """Predict every sample of one context in the given (easy-first) order."""
    if not scores:
        return []
    ctx = scores[0].sample.context_id
    if any(s.sample.context_id != ctx for s in scores):
        raise ValueError("run_context expects samples from a single context")

    state_path = state_dir / f"{ctx}.json" if state_dir else None
    pending = [s.to_json() for s in scores]
    completed: list[dict] = []
    if state_path is not None and state_path.exists():
        state = resume(state_path, config_hash)
        if [p["gene"] for p in state.completed + state.pending] != [p["gene"] for p in pending]:
            raise ResumeRefused(f"{state_path}: checkpoint covers a different sample list")
        completed = state.completed
        pending = state.pending
    state = RunState(ctx, pending, completed, ensemble.config.root_seed, config_hash)

    history = [_history_from_trace(t, config.summary_cap) for t in completed]
    while state.pending:
        score = DifficultyScore.from_json(state.pending[0])
        q = score.sample.query
        chosen = curate_history(history, q.gene, config.history_cap, provider, config.verified_only)
        try:
            prior = priors(q) if priors else None
            pred = ensemble.predict(q, render_history(chosen), prior)
        except (GatewayError, ProviderUnavailable) as exc:
            if state_path is not None:
                state.save(state_path)
            raise RunFailure(ctx, exc) from exc
        trace = trace_record(len(state.completed), score, pred, chosen, run_id)
        state.completed.append(trace)
        state.pending.pop(0)
        history.append(_history_from_trace(trace, config.summary_cap))
        if state_path is not None:
            state.save(state_path)
    return state.completed


def group_by_context(scores: Iterable[DifficultyScore]) -> dict[str, list[DifficultyScore]]:
    """Preserve the given order within each context."""
    out: dict[str, list[DifficultyScore]] = {}
    for s in scores:
        out.setdefault(s.sample.context_id, []).append(s)
    return out


def run_all(
    scores: Sequence[DifficultyScore],
    ensemble: Ensemble,
    provider: InteractionProvider,
    config: EngineConfig = EngineConfig(),
    workers: int = 1,
    state_dir: Path | None = None,
    config_hash: str = "",
    run_id: int = 0,
    priors: PriorFn | None = None,
) -> list[dict]:
    """Run every context; traces come back ordered by context id then processing order."""
    groups = group_by_context(scores)

    def one(ctx: str) -> list[dict]:
        return run_context(groups[ctx], ensemble, provider, config, state_dir, config_hash, run_id, priors)

    ctxs = sorted(groups)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, ctxs))
    else:
        results = [one(c) for c in ctxs]
    return [t for r in results for t in r]


# -- outputs -----------------------------------------------------------------


def write_jsonl(records: Iterable[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def predictions_from_traces(traces: Iterable[dict], labels: Mapping[tuple[str, str, str], int]) -> list[dict]:
    """Join traces with held-out labels; this is the only place labels meet predictions."""
    out = []
    for t in traces:
        key = (t["cell_line"], t["compound"], t["gene"])
        out.append(
            {
                "run_id": t["run_id"],
                "cell_line": t["cell_line"],
                "compound": t["compound"],
                "moa": t["moa"],
                "gene": t["gene"],
                "score": t["score"],
                "predicted_label": answer_to_label(t["answer"]),
                "true_label": labels.get(key),
                "verified": t["verified"],
            }
        )
    return out


# -- audit -------------------------------------------------------------------

_HISTORY_LINE = re.compile(r"^- (\S+): predicted (upregulated|downregulated)", re.M)
_FORBIDDEN = ("true_label", "ground truth", "ground_truth", '"label"', "consensus_z")


def scan_for_label_leaks(requests: Iterable[ChatRequest], traces: Sequence[dict]) -> list[str]:
    """Flag prompts that could carry ground truth.

    Every history line must repeat a prediction that the run actually made
    for that gene, and no prompt may contain label-bearing field names.
    """
    predicted: dict[str, set[str]] = {}
    for t in traces:
        predicted.setdefault(t["gene"], set()).add(t["answer"])
    problems = []
    for i, req in enumerate(requests):
        text = "\n".join(c for _, c in req.messages)
        low = text.lower()
        for token in _FORBIDDEN:
            if token in low:
                problems.append(f"request {i}: contains {token!r}")
        for gene, answer in _HISTORY_LINE.findall(text):
            if answer not in predicted.get(gene, ()):
                problems.append(f"request {i}: history line for {gene} says {answer}, which was never predicted")
    return problems
