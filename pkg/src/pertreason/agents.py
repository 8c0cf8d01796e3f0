"""Expert agents, integration agent and the judge gate.

For one query the three experts (context, mechanism, network) run once and
independently. The integration agent then turns their evidence, plus any
curated history, into a candidate answer, and the judges vet it. A candidate
is accepted only when no judge calls it problematic; otherwise integration is
retried with the judges' feedback appended, up to ``max_retries`` times.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import jsonout, prompts
from .gateway import CallSettings, ask
from .jsonout import MalformedAgentOutput
from .samples import UPREGULATED, Query, derive_seed

log = logging.getLogger(__name__)

EXPERT_KINDS = ("context", "mechanism", "network")
_EXPERT_SCHEMA = {"context": jsonout.CONTEXT, "mechanism": jsonout.MECHANISM, "network": jsonout.NETWORK}
_EXPERT_FIELDS = {
    "context": ("context_reasoning", "pathway_activity"),
    "mechanism": ("mechanism_reasoning", "primary_action"),
    "network": ("network_reasoning", "edge_type"),
}

# judge id -> template; the fourth slot repeats the consistency check with its own seed
DEFAULT_JUDGES: tuple[tuple[int, str], ...] = (
    (1, "history_leakage"),
    (2, "grounding"),
    (3, "consistency"),
    (4, "consistency"),
)

PROBLEMATIC, NOT_PROBLEMATIC = "problematic", "not-problematic"


@dataclass(frozen=True)
class ExpertOutput:
    kind: str
    reasoning: str
    tag: str
    failed: bool = False
    error: str = ""

    def to_json(self) -> dict:
        return {"kind": self.kind, "reasoning": self.reasoning, "tag": self.tag, "failed": self.failed, "error": self.error}


@dataclass(frozen=True)
class NeuralPrior:
    answer: str
    confidence: float

    def __post_init__(self):
        if self.answer not in jsonout.ANSWERS:
            raise ValueError(f"prior answer must be one of {sorted(jsonout.ANSWERS)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("prior confidence must lie in [0, 1]")


@dataclass(frozen=True)
class IntegrationOutput:
    reasoning: str
    answer: str
    canonical_reasoning: str
    counterfactual_reasoning: str | None = None

    def to_json(self) -> dict:
        return {
            "reasoning": self.reasoning,
            "answer": self.answer,
            "canonical_reasoning": self.canonical_reasoning,
            "counterfactual_reasoning": self.counterfactual_reasoning,
        }


@dataclass(frozen=True)
class JudgeVerdict:
    judge_id: int
    judge: str
    verdict: str
    feedback: str

    @property
    def problematic(self) -> bool:
        return self.verdict == PROBLEMATIC

    def to_json(self) -> dict:
        return {"judge_id": self.judge_id, "judge": self.judge, "verdict": self.verdict, "feedback": self.feedback}


@dataclass
class Attempt:
    candidate: IntegrationOutput | None
    verdicts: list[JudgeVerdict]
    m: int
    error: str = ""

    def to_json(self) -> dict:
        return {
            "candidate": self.candidate.to_json() if self.candidate else None,
            "verdicts": [v.to_json() for v in self.verdicts],
            "m": self.m,
            "error": self.error,
        }


@dataclass
class GateResult:
    attempts: list[Attempt]
    chosen: int
    accepted: bool

    @property
    def candidate(self) -> IntegrationOutput | None:
        return self.attempts[self.chosen].candidate

    @property
    def m(self) -> int:
        return self.attempts[self.chosen].m

    @property
    def retries(self) -> int:
        return len(self.attempts) - 1

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "verified": self.accepted,
            "chosen_attempt": self.chosen,
            "retries": self.retries,
            "m": self.m,
            "answer": self.candidate.answer if self.candidate else None,
            "attempts": [a.to_json() for a in self.attempts],
        }


def judge_gate(
    regenerate: Callable[[int, str | None], IntegrationOutput],
    evaluate: Callable[[IntegrationOutput, int], list[JudgeVerdict]],
    max_retries: int = 3,
    n_judges: int = 4,
) -> GateResult:
    """Accept the first candidate with zero problematic verdicts.

    ``regenerate(attempt, feedback)`` produces a candidate (attempt 0 has no
    feedback); ``evaluate(candidate, attempt)`` runs the judges. A candidate
    that fails to parse scores ``n_judges + 1`` so any parsed candidate beats
    it. After ``max_retries`` failed retries the attempt with the smallest
    problematic count (earliest on ties) is returned unaccepted.
    """
    attempts: list[Attempt] = []
    feedback = None
    for attempt in range(max_retries + 1):
        try:
            cand = regenerate(attempt, feedback)
        except MalformedAgentOutput as exc:
            attempts.append(Attempt(None, [], n_judges + 1, str(exc)))
            feedback = f"The previous answer was not valid JSON in the required format ({exc})."
            continue
        verdicts = evaluate(cand, attempt)
        m = sum(v.problematic for v in verdicts)
        attempts.append(Attempt(cand, verdicts, m))
        if m == 0:
            return GateResult(attempts, attempt, True)
        feedback = "\n".join(f"Judge {v.judge_id} ({v.judge}): {v.feedback}" for v in verdicts if v.problematic)
    best = min(range(len(attempts)), key=lambda i: (attempts[i].m, i))
    return GateResult(attempts, best, False)


@dataclass(frozen=True)
class EnsembleConfig:
    k_samples: int = 5
    max_retries: int = 3
    expert_attempts: int = 2
    judges: tuple[tuple[int, str], ...] = DEFAULT_JUDGES
    call: CallSettings = CallSettings()
    root_seed: int = 0


@dataclass
class Prediction:
    """Outcome of ``Ensemble.predict`` for one query."""

    experts: list[ExpertOutput]
    draws: list[GateResult]
    score: float
    answer: str
    verified: bool
    reasoning: str
    prior: NeuralPrior | None = None
    history_genes: list[str] = field(default_factory=list)


class Ensemble:
    def __init__(self, backend, config: EnsembleConfig = EnsembleConfig(), targets: Callable[[str], Sequence[str]] | None = None):
        self.backend = backend
        self.config = config
        self._targets = targets or (lambda moa: [])

    # -- experts -------------------------------------------------------------

    def expert_messages(self, kind: str, query: Query, history_block: str = "") -> list[dict[str, str]]:
        tmpl = prompts.load(kind)
        if kind == "network":
            targets = list(self._targets(query.moa))
            msgs = tmpl.fill(pert_target=", ".join(targets) if targets else query.perturbation, target_gene=query.gene)
        elif kind == "mechanism":
            msgs = tmpl.fill(pert_or_moa=query.moa, drug_name=query.compound, target_gene=query.gene)
        else:
            msgs = tmpl.fill(cell_line=query.cell_line, pert_or_moa=query.perturbation, target_gene=query.gene)
        if history_block:
            msgs = prompts.append_section(msgs, prompts.HISTORY_HEADER, history_block)
        return msgs

    def run_experts(self, query: Query, history_block: str = "") -> list[ExpertOutput]:
        """One output per expert kind, in fixed kind order. Failures are recorded, not raised."""
        out = []
        for kind in EXPERT_KINDS:
            msgs = self.expert_messages(kind, query, history_block)
            reason_key, tag_key = _EXPERT_FIELDS[kind]
            result = None
            error = ""
            for attempt in range(self.config.expert_attempts):
                seed = derive_seed(self.config.root_seed, "expert", query.context_id, query.gene, kind, attempt)
                try:
                    parsed = jsonout.extract_json(ask(self.backend, msgs, seed, self.config.call), _EXPERT_SCHEMA[kind])
                except MalformedAgentOutput as exc:
                    error = str(exc)
                    continue
                result = ExpertOutput(kind, parsed[reason_key], parsed[tag_key])
                break
            if result is None:
                log.info("%s expert failed for %s/%s: %s", kind, query.context_id, query.gene, error)
                result = ExpertOutput(kind, "", "", failed=True, error=error)
            out.append(result)
        return out

    # -- integration ---------------------------------------------------------

    def integration_messages(
        self,
        query: Query,
        experts: Sequence[ExpertOutput],
        history_block: str = "",
        prior: NeuralPrior | None = None,
        feedback: str | None = None,
    ) -> list[dict[str, str]]:
        by_kind = {e.kind: e for e in experts}

        def evidence(kind: str) -> str:
            e = by_kind.get(kind)
            if e is None or e.failed:
                return f"no evidence from {kind} agent"
            return f"{e.reasoning} [{_EXPERT_FIELDS[kind][1]}: {e.tag}]"

        values = dict(
            cell_line=query.cell_line,
            target_gene=query.gene,
            pert_or_moa=query.perturbation,
            context_reasoning=evidence("context"),
            mechanism_reasoning=evidence("mechanism"),
            network_reasoning=evidence("network"),
        )
        if prior is not None:
            msgs = prompts.load("integration_prior").fill(
                prior_label=prior.answer, prior_confidence=f"{prior.confidence:.3f}", **values
            )
        else:
            msgs = prompts.load("integration").fill(**values)
        if history_block:
            msgs = prompts.append_section(msgs, prompts.HISTORY_HEADER, history_block)
        if feedback:
            msgs = prompts.append_section(msgs, prompts.FEEDBACK_HEADER, feedback)
        return msgs

    def integrate(
        self,
        query: Query,
        experts: Sequence[ExpertOutput],
        seed: int,
        history_block: str = "",
        prior: NeuralPrior | None = None,
        feedback: str | None = None,
    ) -> IntegrationOutput:
        msgs = self.integration_messages(query, experts, history_block, prior, feedback)
        text = ask(self.backend, msgs, seed, self.config.call)
        if prior is not None:
            p = jsonout.extract_json(text, jsonout.INTEGRATION_WITH_PRIOR)
            return IntegrationOutput(p["reasoning"], p["answer"], p["canonical_reasoning"], p["counterfactual_reasoning"])
        p = jsonout.extract_json(text, jsonout.INTEGRATION)
        return IntegrationOutput(p["reasoning"], p["answer"], p["reasoning"], None)

    # -- judges --------------------------------------------------------------

    def judge_messages(self, judge: str, query: Query, cand: IntegrationOutput, history_summary: str) -> list[dict[str, str]]:
        values = dict(
            canonical_reasoning=cand.canonical_reasoning,
            counterfactual_reasoning=cand.counterfactual_reasoning or "N/A",
            final_reasoning=cand.reasoning,
            final_answer=cand.answer,
        )
        if judge == "history_leakage":
            values["history_summary"] = history_summary or "None"
        elif judge == "grounding":
            values.update(cell_line=query.cell_line, pert_or_moa=query.perturbation, target_gene=query.gene)
        return prompts.load(judge).fill(**values)

    def run_judges(self, query: Query, cand: IntegrationOutput, history_summary: str, draw: int, attempt: int) -> list[JudgeVerdict]:
        verdicts = []
        for judge_id, judge in self.config.judges:
            seed = derive_seed(self.config.root_seed, "judge", query.context_id, query.gene, draw, attempt, judge_id)
            text = ask(self.backend, self.judge_messages(judge, query, cand, history_summary), seed, self.config.call)
            try:
                parsed = jsonout.extract_json(text, jsonout.JUDGE)
                verdicts.append(JudgeVerdict(judge_id, judge, parsed["verdict"], parsed.get("feedback", "")))
            except MalformedAgentOutput as exc:
                verdicts.append(JudgeVerdict(judge_id, judge, PROBLEMATIC, f"unparseable judge output ({exc})"))
        return verdicts

    def gate(
        self,
        query: Query,
        experts: Sequence[ExpertOutput],
        history_block: str = "",
        prior: NeuralPrior | None = None,
        draw: int = 0,
    ) -> GateResult:
        def regenerate(attempt: int, feedback: str | None) -> IntegrationOutput:
            seed = derive_seed(self.config.root_seed, "integrate", query.context_id, query.gene, draw, attempt)
            return self.integrate(query, experts, seed, history_block, prior, feedback)

        def evaluate(cand: IntegrationOutput, attempt: int) -> list[JudgeVerdict]:
            return self.run_judges(query, cand, history_block, draw, attempt)

        return judge_gate(regenerate, evaluate, self.config.max_retries, len(self.config.judges))

    # -- full prediction -----------------------------------------------------

    def predict(self, query: Query, history_block: str = "", prior: NeuralPrior | None = None) -> Prediction:
        experts = self.run_experts(query, history_block)
        draws = [self.gate(query, experts, history_block, prior, draw=k) for k in range(self.config.k_samples)]
        verified = [d for d in draws if d.accepted]
        pool = verified or [d for d in draws if d.candidate is not None]
        score = up_fraction([d.candidate.answer for d in pool]) if pool else 0.5
        answer = UPREGULATED if score >= 0.5 else "downregulated"
        backing = next((d.candidate for d in pool if d.candidate.answer == answer), None)
        return Prediction(
            experts=experts,
            draws=draws,
            score=score,
            answer=answer,
            verified=bool(verified),
            reasoning=backing.reasoning if backing else "",
            prior=prior,
        )


def up_fraction(answers: Sequence[str]) -> float:
    """Share of answers that are ``upregulated``."""
    if not answers:
        raise ValueError("no answers")
    return sum(a == UPREGULATED for a in answers) / len(answers)
