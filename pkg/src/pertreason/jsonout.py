"""Strict JSON extraction from free-form agent output."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Mapping


class MalformedAgentOutput(ValueError):
    def __init__(self, detail: str):
        super().__init__(f"malformed agent output: {detail}")


def _canon(text: str) -> str:
    return re.sub(r"[\s_\-]+", "", text.strip().lower())


@dataclass(frozen=True)
class Schema:
    """Required keys with an optional closed value domain each.

    ``None`` as a domain means any non-empty string.
    """

    required: Mapping[str, frozenset[str] | None]
    optional: Mapping[str, frozenset[str] | None] = field(default_factory=dict)

    def check(self, obj: object) -> dict[str, str] | str:
        """Normalised record, or a string describing the first violation."""
        if not isinstance(obj, dict):
            return "not a JSON object"
        out = {}
        for key, domain in list(self.required.items()) + list(self.optional.items()):
            if key not in obj:
                if key in self.required:
                    return f"missing key {key!r}"
                continue
            value = obj[key]
            if not isinstance(value, str) or not value.strip():
                if key in self.required:
                    return f"{key!r} must be a non-empty string"
                continue
            if domain is not None:
                match = next((d for d in domain if _canon(d) == _canon(value)), None)
                if match is None:
                    return f"{key!r}={value!r} not in {sorted(domain)}"
                value = match
            out[key] = value.strip()
        return out


def extract_json(content: str, schema: Schema) -> dict[str, str]:
    """Return the first JSON object in ``content`` that satisfies ``schema``.

    Prose and code fences around the object are tolerated.
    """
    decoder = json.JSONDecoder()
    first_problem = "no JSON object found"
    seen_object = False
    for m in re.finditer(r"\{", content):
        try:
            obj, _ = decoder.raw_decode(content, m.start())
        except ValueError:
            continue
        result = schema.check(obj)
        if isinstance(result, dict):
            return result
        if not seen_object:
            first_problem, seen_object = result, True
    raise MalformedAgentOutput(first_problem)


ANSWERS = frozenset({"upregulated", "downregulated"})
VERDICTS = frozenset({"problematic", "not-problematic"})

PROBE = Schema({"answer": ANSWERS})
CONTEXT = Schema({"context_reasoning": None, "pathway_activity": frozenset({"active", "inactive", "unknown"})})
MECHANISM = Schema({"mechanism_reasoning": None, "primary_action": None})
NETWORK = Schema(
    {
        "network_reasoning": None,
        "edge_type": frozenset({"positive_regulation", "negative_regulation", "complex"}),
    }
)
INTEGRATION = Schema({"reasoning": None, "answer": ANSWERS})
INTEGRATION_WITH_PRIOR = Schema(
    {"reasoning": None, "answer": ANSWERS, "canonical_reasoning": None, "counterfactual_reasoning": None}
)
JUDGE = Schema({"verdict": VERDICTS}, optional={"feedback": None})
