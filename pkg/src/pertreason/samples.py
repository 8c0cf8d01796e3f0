"""Query samples and deterministic seed derivation."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from .prompts import pert_or_moa
from .signatures import BenchmarkItem

UPREGULATED, DOWNREGULATED = "upregulated", "downregulated"


def answer_to_label(answer: str) -> int:
    return 1 if answer == UPREGULATED else 0


def label_to_answer(label: int) -> str:
    return UPREGULATED if label == 1 else DOWNREGULATED


@dataclass(frozen=True)
class Query:
    """What an agent is allowed to see about a sample: no label."""

    cell_line: str
    compound: str
    moa: str
    gene: str

    @property
    def perturbation(self) -> str:
        return pert_or_moa(self.moa, self.compound)

    @property
    def context_id(self) -> str:
        return context_id(self.cell_line, self.compound)


@dataclass(frozen=True)
class Sample:
    cell_line: str
    compound: str
    moa: str
    gene: str
    label: int | None = None

    def __post_init__(self):
        for name in ("cell_line", "compound", "moa", "gene"):
            if not getattr(self, name):
                raise ValueError(f"sample field {name} is empty")

    @classmethod
    def from_item(cls, item: BenchmarkItem) -> "Sample":
        return cls(item.cell_line, item.compound, item.moa, item.gene, item.label)

    @property
    def query(self) -> Query:
        return Query(self.cell_line, self.compound, self.moa, self.gene)

    @property
    def context_id(self) -> str:
        return context_id(self.cell_line, self.compound)


def context_id(cell_line: str, compound: str) -> str:
    """Filesystem-safe identifier for a (cell line, compound) context."""
    raw = f"{cell_line}__{compound}"
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", raw)


def derive_seed(root: int, *parts: object) -> int:
    """Stable 31-bit seed from a root seed and a path of identifiers."""
    text = "\x1f".join([str(root)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "big") & 0x7FFFFFFF
