"""Synthetic oracle backend: a deterministic stand-in for an LLM.

The oracle recognises each agent role from its system prompt and the sample
from the question line, then answers correctly with a configured
probability. Hard samples gain ``context_boost`` accuracy when the
integration prompt's history holds at least one correct prediction for a
related easy gene. Every draw is a hash of (rng_seed, request), so the same
request always yields the same response regardless of call order.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .gateway import Backend, ChatRequest, request_hash
from .samples import DOWNREGULATED, UPREGULATED, Sample, label_to_answer

Key = tuple[str, str, str]  # (cell_line, perturbation phrase, gene)

_QUESTION = re.compile(r"^In (.+?), will (\S+) be upregulated or downregulated by (.+)\?$", re.M)
_HISTORY_LINE = re.compile(r"^- (\S+): predicted (upregulated|downregulated)", re.M)

_ROLE_MARKERS = (
    ("probe", "You are a biologist answering"),
    ("context", "You are a Cancer Dependency expert"),
    ("network", "You are a Systems Biology expert"),
    ("mechanism", "You are a Molecular Pharmacologist"),
    ("integration", "You are a Molecular Biology Expert"),
    ("history_leakage", "You are a History Leakage Inspector"),
    ("grounding", "You are a Grounding Consistency Inspector"),
    ("consistency", "You are a Logical Consistency Checker"),
)


def role_of(req: ChatRequest) -> str:
    system = req.system
    for role, marker in _ROLE_MARKERS:
        if system.startswith(marker):
            return role
    return "unknown"


def sample_key(sample: Sample) -> Key:
    return (sample.cell_line, sample.query.perturbation, sample.gene)


@dataclass
class OracleWorld:
    truth: Mapping[Key, int]
    base_accuracy_easy: float = 0.9
    base_accuracy_hard: float = 0.5
    context_boost: float = 0.2
    rng_seed: int = 0
    hard: frozenset[Key] = frozenset()
    related: Mapping[Key, frozenset[str]] = field(default_factory=dict)
    judge_problem_rate: float = 0.0
    malformed_rate: float = 0.0

    def __post_init__(self):
        for name in ("base_accuracy_easy", "base_accuracy_hard", "context_boost", "judge_problem_rate", "malformed_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[Sample],
        hard: Iterable[Sample] = (),
        related: Mapping[Sample, Iterable[str]] | None = None,
        **kw,
    ) -> "OracleWorld":
        truth = {}
        for s in samples:
            if s.label is None:
                raise ValueError(f"oracle world needs labelled samples ({s.gene})")
            truth[sample_key(s)] = s.label
        return cls(
            truth=truth,
            hard=frozenset(sample_key(s) for s in hard),
            related={sample_key(s): frozenset(g) for s, g in (related or {}).items()},
            **kw,
        )

    def accuracy(self, key: Key, history: Mapping[str, str] | None = None) -> float:
        if key not in self.hard:
            return self.base_accuracy_easy
        p = self.base_accuracy_hard
        if history and self._anchored(key, history):
            p = min(1.0, p + self.context_boost)
        return p

    def _anchored(self, key: Key, history: Mapping[str, str]) -> bool:
        cell, pert, _ = key
        for gene in self.related.get(key, ()):
            hkey = (cell, pert, gene)
            if hkey in self.truth and hkey not in self.hard and history.get(gene) == label_to_answer(self.truth[hkey]):
                return True
        return False


class OracleBackend(Backend):
    name = "oracle"

    def __init__(self, world: OracleWorld, max_in_flight: int = 64):
        super().__init__(max_in_flight)
        self.world = world

    def _uniform(self, req: ChatRequest, salt: str) -> float:
        h = hashlib.sha256(f"{self.world.rng_seed}|{salt}|{request_hash(req)}".encode()).digest()
        return int.from_bytes(h[:8], "big") / 2**64

    def _complete(self, req: ChatRequest) -> str:
        role = role_of(req)
        user = req.user
        m = _QUESTION.search(user)
        key: Key | None = (m.group(1), m.group(3), m.group(2)) if m else None
        if role in ("context", "mechanism", "network", "integration") and self._uniform(req, "malformed") < self.world.malformed_rate:
            return "I think the answer depends on many factors and cannot be summarised."
        if role == "probe":
            return json.dumps({"answer": self._answer(req, key, None)})
        if role == "integration":
            history = dict(_HISTORY_LINE.findall(user.split("[Previous History]", 1)[1])) if "[Previous History]" in user else {}
            answer = self._answer(req, key, history)
            gene = key[2] if key else "the target gene"
            reasoning = f"Integrated evidence points to {gene} being {answer} in this context."
            out = {"reasoning": reasoning, "answer": answer}
            if "counterfactual_reasoning" in req.system:
                out["canonical_reasoning"] = f"Agent evidence alone suggests {gene} is {answer}."
                out["counterfactual_reasoning"] = f"If the network prior holds, {gene} could move the other way."
            return json.dumps(out)
        if role == "context":
            return json.dumps({"context_reasoning": "Driver status and basal expression considered.", "pathway_activity": "active"})
        if role == "mechanism":
            return json.dumps({"mechanism_reasoning": "(Drug)-(inhibits)->(Target)", "primary_action": "inhibition"})
        if role == "network":
            return json.dumps({"network_reasoning": "(Target)-(activates)->(TF)-(induces)->(Gene)", "edge_type": "positive_regulation"})
        if role in ("history_leakage", "grounding", "consistency"):
            bad = self._uniform(req, "judge") < self.world.judge_problem_rate
            return json.dumps(
                {
                    "verdict": "problematic" if bad else "not-problematic",
                    "feedback": f"{role}: {'issue found' if bad else 'no issue'}",
                }
            )
        return "unrecognised request"

    def _answer(self, req: ChatRequest, key: Key | None, history: Mapping[str, str] | None) -> str:
        u = self._uniform(req, "answer")
        if key is None or key not in self.world.truth:
            return UPREGULATED if u < 0.5 else DOWNREGULATED
        truth = label_to_answer(self.world.truth[key])
        wrong = DOWNREGULATED if truth == UPREGULATED else UPREGULATED
        return truth if u < self.world.accuracy(key, history) else wrong
