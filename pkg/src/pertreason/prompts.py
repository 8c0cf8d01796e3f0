"""Prompt templates for the probe, expert, integration and judge agents.

Each template file under ``prompts/`` holds a system part and a user part
separated by a ``=== USER ===`` line. Only the user part has placeholders.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

PROMPT_VERSION = "1"

_SPLIT = "\n=== USER ===\n"
_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")

TEMPLATES = (
    "probe",
    "context",
    "mechanism",
    "network",
    "integration",
    "integration_prior",
    "history_leakage",
    "grounding",
    "consistency",
)


class TemplateError(KeyError):
    pass


@dataclass(frozen=True)
class Template:
    name: str
    system: str
    user: str

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.user))

    def fill(self, **values: str) -> list[dict[str, str]]:
        """Return chat messages with every user placeholder substituted."""
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"{self.name}: missing values for {sorted(missing)}")
        user = _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.user)
        return [{"role": "system", "content": self.system}, {"role": "user", "content": user}]


@lru_cache(maxsize=None)
def load(name: str) -> Template:
    if name not in TEMPLATES:
        raise TemplateError(name)
    text = resources.files("pertreason").joinpath("prompts", f"{name}.txt").read_text()
    system, user = text.split(_SPLIT, 1)
    return Template(name, system.strip(), user.strip())


def pert_or_moa(moa: str, compound: str) -> str:
    """Perturbation phrase shown to agents: the MoA, with the compound in parentheses."""
    if not compound or compound == moa:
        return moa
    return f"{moa} ({compound})"


def append_section(messages: list[dict[str, str]], header: str, body: str) -> list[dict[str, str]]:
    """Append a bracketed section to the last user message."""
    out = [dict(m) for m in messages]
    out[-1]["content"] = f"{out[-1]['content']}\n[{header}]\n{body}"
    return out


HISTORY_HEADER = "Previous History"
FEEDBACK_HEADER = "Judge Feedback"
