"""Synthetic fixtures shared by the test modules."""

from __future__ import annotations

import random
from pathlib import Path
from typing import Callable

from pertreason import gateway as gw
from pertreason.knowledge import write_snapshot

PAIRS = [
    ("A375", "vemurafenib", "BRAF inhibitor"),
    ("HT29", "trametinib", "MEK inhibitor"),
]
TARGETS = {"BRAF inhibitor": "BRAF", "MEK inhibitor": "MAP2K1"}
CATEGORIES = {"A375": "skin", "HT29": "large intestine", "MCF7": "breast"}


class FnBackend(gw.Backend):
    """Backend whose reply is ``fn(request)``; records every request."""

    name = "scripted"

    def __init__(self, fn: Callable[[gw.ChatRequest], str], max_in_flight: int = 8):
        super().__init__(max_in_flight)
        self.fn = fn
        self.requests: list[gw.ChatRequest] = []

    def _complete(self, req):
        self.requests.append(req)
        return self.fn(req)


def write_inputs(root: Path, seed: int = 0, n_genes: int = 50) -> dict[str, Path]:
    """Conditions, z-scores, annotations, snapshot and categories for two usable
    pairs plus one pair that is rejected for having too few consistent genes."""
    rnd = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    cond_rows = ["condition_id\tcell_line\tcompound\tdose_um\ttime_h\treplicate_count\tis_hiq\tqc_pass\tpert_type"]
    z_rows = ["condition_id\tgene\tz"]
    genes = [f"G{i:02d}" for i in range(n_genes)]

    def add_pair(cell, cpd, n_consistent):
        for c in range(3):
            cid = f"{cell}_{cpd}_{c}"
            cond_rows.append(f"{cid}\t{cell}\t{cpd}\t{10 ** (c - 1)}\t24\t{c + 1}\t1\t1\ttrt_cp")
            for i, g in enumerate(genes):
                sign = 1 if i % 2 == 0 else -1
                if i >= n_consistent and c == 0:
                    sign = -sign  # breaks consistency to 2/3
                z_rows.append(f"{cid}\t{g}\t{sign * (0.5 + rnd.random() * 4):.4f}")

    for cell, cpd, _ in PAIRS:
        add_pair(cell, cpd, n_genes)
    add_pair("MCF7", "vemurafenib", 30)
    # rows that the quality filter must drop
    cond_rows.append("lowq\tA375\tvemurafenib\t1\t6\t2\t0\t1\ttrt_cp")
    cond_rows.append("shrna\tA375\tvemurafenib\t\t96\t2\t1\t1\ttrt_sh")
    for g in genes:
        z_rows.append(f"lowq\t{g}\t-9.0")
        z_rows.append(f"shrna\t{g}\t-9.0")

    paths = {
        "conditions": root / "conditions.tsv",
        "zscores": root / "zscores.tsv",
        "moa": root / "moa.tsv",
        "moa_targets": root / "moa_targets.tsv",
        "snapshot": root / "string_edges.tsv",
        "categories": root / "categories.tsv",
        "pairs": root / "pairs.tsv",
        "config": root / "config.ini",
    }
    paths["conditions"].write_text("\n".join(cond_rows) + "\n")
    paths["zscores"].write_text("\n".join(z_rows) + "\n")
    paths["moa"].write_text("compound\tmoa\n" + "".join(f"{cpd}\t{moa}\n" for _, cpd, moa in PAIRS))
    paths["moa_targets"].write_text("moa\tgene\n" + "".join(f"{m}\t{g}\n" for m, g in TARGETS.items()))
    paths["categories"].write_text("cell_line\tcategory\n" + "".join(f"{c}\t{k}\n" for c, k in CATEGORIES.items()))
    paths["pairs"].write_text("cell_line\tcompound\tsplit\n" + "".join(f"{c}\t{p}\ttest\n" for c, p, _ in PAIRS) + "MCF7\tvemurafenib\ttest\n")

    edges = {}
    for t in TARGETS.values():
        for g in genes:
            if rnd.random() < 0.6:
                edges[(t, g)] = rnd.randint(150, 999)
    for _ in range(3 * n_genes):
        a, b = rnd.sample(genes, 2)
        edges[(a, b)] = rnd.randint(150, 999)
    write_snapshot(edges, paths["snapshot"])

    paths["config"].write_text(
        "[run]\nseed = 7\nworkers = 1\n\n"
        "[gateway]\nbackend = oracle\ntemperature = 0.7\n\n"
        "[oracle]\nbase_accuracy_easy = 0.85\nbase_accuracy_hard = 0.55\njudge_problem_rate = 0.15\nmalformed_rate = 0.05\n\n"
        "[knowledge]\nsnapshot = string_edges.tsv\nmoa_targets = moa_targets.tsv\n\n"
        "[scheduler]\ntrials = 3\n\n"
        "[ensemble]\nk_samples = 2\n\n"
        "[benchmark]\nper_direction = 5\n"
    )
    return paths


def run_pipeline(paths: dict[str, Path], out: Path, *, workers: int = 1, wrap=None, backend=None, overrides=()) -> dict[str, Path]:
    """build -> probe -> run -> evaluate -> case-study through the stage functions.

    ``wrap`` receives the configured backend (e.g. to put a Recorder around it);
    ``backend`` replaces it outright."""
    from pertreason import pipeline
    from pertreason.config import Config

    cfg = Config.load(paths["config"])
    for o in overrides:
        cfg.override(o)
    cfg.set("run", "workers", workers)
    dirs = {k: out / k for k in ("bench", "probe", "run", "eval", "case")}
    pipeline.stage_build_benchmark(cfg, paths["conditions"], paths["zscores"], paths["moa"], dirs["bench"], paths["pairs"])
    bench = dirs["bench"] / "benchmark.jsonl"
    provider = pipeline.build_provider(cfg)
    if backend is None:
        backend = pipeline.build_backend(cfg, pipeline.read_benchmark(bench), provider)
        if wrap is not None:
            backend = wrap(backend)
    pipeline.stage_probe(cfg, bench, dirs["probe"], provider=provider, backend=backend)
    pipeline.stage_run(cfg, bench, dirs["probe"] / "scores.jsonl", dirs["run"], provider=provider, backend=backend)
    preds = [dirs["run"] / "predictions.jsonl"]
    pipeline.stage_evaluate(cfg, preds, paths["categories"], dirs["eval"])
    pipeline.stage_case_study(cfg, preds, "A375", dirs["case"])
    return dirs


def output_bytes(root: Path) -> dict[str, bytes]:
    """Every produced file under ``root`` except timestamped manifests."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}
