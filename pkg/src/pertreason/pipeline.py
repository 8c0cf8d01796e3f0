"""Stage wiring shared by the command line and the end-to-end tests.

Each stage reads its inputs, writes its outputs into one directory and
records a ``manifest.json`` there.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import de, difficulty, engine, metrics, report
from .agents import DEFAULT_JUDGES, Ensemble, EnsembleConfig, NeuralPrior
from .config import Config, ConfigError
from .gateway import CallSettings, LiveBackend, ScriptedBackend
from .knowledge import InteractionProvider, LiveStringSource, read_moa_targets, read_snapshot
from .oracle import OracleBackend, OracleWorld
from .samples import Query, Sample, derive_seed
from .signatures import (
    BenchmarkItem,
    QualityPolicy,
    build_benchmark,
    read_moa_annotations,
    read_pairs,
    read_signatures,
)

log = logging.getLogger(__name__)


class InputError(ValueError):
    pass


# -- small io helpers --------------------------------------------------------


def read_benchmark(path: Path) -> list[BenchmarkItem]:
    try:
        return [BenchmarkItem.from_json(r) for r in engine.read_jsonl(path)]
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read benchmark {path}: {exc}") from exc


def write_benchmark(items: Sequence[BenchmarkItem], path: Path) -> None:
    engine.write_jsonl((i.to_json() for i in items), path)


def read_categories(path: Path) -> dict[str, str]:
    """``cell_line<TAB>category`` mapping."""
    with open(path, newline="") as fh:
        return {r["cell_line"].strip(): r["category"].strip() for r in csv.DictReader(fh, delimiter="\t")}


def read_priors(path: Path) -> dict[tuple[str, str, str], NeuralPrior]:
    """``cell_line, compound, gene, predicted_label, confidence`` rows from an external model."""
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            lab = r["predicted_label"].strip().lower()
            answer = "upregulated" if lab in ("1", "up", "upregulated") else "downregulated"
            out[(r["cell_line"].strip(), r["compound"].strip(), r["gene"].strip())] = NeuralPrior(answer, float(r["confidence"]))
    return out


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: Config, inputs: dict[str, Path | None], outputs: Sequence[Path], started: str, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.to_json(),
        "inputs": {k: {"path": str(v), "sha256": _sha(v)} for k, v in inputs.items() if v is not None and Path(v).is_file()},
        "outputs": {p.name: _sha(p) for p in outputs if p.is_file()},
        "root_seed": cfg.get("run", "seed"),
        "seed_policy": cfg.get("run", "seed_policy"),
        "started": started,
        "finished": _now(),
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    report.write_json(manifest, path)
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- wiring ------------------------------------------------------------------


def build_provider(cfg: Config) -> InteractionProvider:
    snap_path = cfg.path("knowledge", "snapshot")
    moa_path = cfg.path("knowledge", "moa_targets")
    snapshot = read_snapshot(snap_path) if snap_path else None
    live = None
    if cfg.get("knowledge", "live"):
        live = LiveStringSource(cfg.get("knowledge", "live_url"), cfg.get("knowledge", "species"), cfg.get("knowledge", "timeout"))
    if snapshot is None and live is None:
        snapshot = {}
        log.warning("no interaction snapshot configured; all relatedness scores will be 0")
    return InteractionProvider(
        snapshot=snapshot,
        live=live,
        moa_targets=read_moa_targets(moa_path) if moa_path else {},
        aggregate=cfg.get("knowledge", "aggregate"),
        strict=cfg.get("knowledge", "strict"),
    )


def run_seed(cfg: Config, run_id: int) -> int:
    root = cfg.get("run", "seed")
    policy = cfg.get("run", "seed_policy")
    if policy == "fixed":
        return root
    if policy == "per-run":
        return derive_seed(root, "run", run_id)
    raise ConfigError(f"unknown seed_policy {policy!r}")


def oracle_world(items: Sequence[BenchmarkItem], provider: InteractionProvider, cfg: Config) -> OracleWorld:
    """Synthetic world over the benchmark: hash-chosen hard samples, related genes from the snapshot."""
    o = cfg.values["oracle"]
    seed = cfg.get("run", "seed")
    samples = [Sample.from_item(i) for i in items]
    hard = [s for s in samples if derive_seed(seed, "hard", s.context_id, s.gene) / 2**31 < o["hard_fraction"]]
    by_ctx: dict[str, list[Sample]] = {}
    for s in samples:
        by_ctx.setdefault(s.context_id, []).append(s)
    related = {}
    for s in hard:
        related[s] = [
            t.gene
            for t in by_ctx[s.context_id]
            if t.gene != s.gene and provider.gene_gene(s.gene, t.gene).score >= o["related_min_score"]
        ]
    return OracleWorld.from_samples(
        samples,
        hard=hard,
        related=related,
        base_accuracy_easy=o["base_accuracy_easy"],
        base_accuracy_hard=o["base_accuracy_hard"],
        context_boost=o["context_boost"],
        rng_seed=seed,
        judge_problem_rate=o["judge_problem_rate"],
        malformed_rate=o["malformed_rate"],
    )


def build_backend(cfg: Config, items: Sequence[BenchmarkItem], provider: InteractionProvider):
    kind = cfg.get("gateway", "backend")
    cap = cfg.get("gateway", "max_in_flight")
    if kind == "oracle":
        return OracleBackend(oracle_world(items, provider, cfg), max_in_flight=cap)
    if kind == "scripted":
        script = cfg.path("gateway", "script")
        if script is None:
            raise ConfigError("scripted backend needs gateway.script")
        return ScriptedBackend.from_file(script, max_in_flight=cap)
    if kind == "live":
        return LiveBackend(cfg.get("gateway", "base_url"), cfg.get("gateway", "api_key_env"), cfg.get("gateway", "timeout"), cap)
    raise ConfigError(f"unknown backend {kind!r}")


def call_settings(cfg: Config) -> CallSettings:
    return CallSettings(cfg.get("gateway", "model"), cfg.get("gateway", "temperature"), cfg.get("gateway", "max_tokens"))


def build_ensemble(cfg: Config, backend, provider: InteractionProvider, run_id: int = 0) -> Ensemble:
    judges = DEFAULT_JUDGES if cfg.get("ensemble", "fourth_judge") else DEFAULT_JUDGES[:3]
    ecfg = EnsembleConfig(
        k_samples=cfg.get("ensemble", "k_samples"),
        max_retries=cfg.get("ensemble", "max_retries"),
        expert_attempts=cfg.get("ensemble", "expert_attempts"),
        judges=judges,
        call=call_settings(cfg),
        root_seed=run_seed(cfg, run_id),
    )
    return Ensemble(backend, ecfg, targets=provider.targets)


# -- stages ------------------------------------------------------------------


def stage_build_benchmark(
    cfg: Config,
    conditions: Path,
    zscores: Path,
    moa: Path,
    out_dir: Path,
    pairs: Path | None = None,
) -> dict:
    started = _now()
    out_dir.mkdir(parents=True, exist_ok=True)
    diagnostics: list[str] = []
    try:
        sigs = read_signatures(conditions, zscores, diagnostics)
        moa_of = read_moa_annotations(moa)
        pair_list = read_pairs(pairs) if pairs else None
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    b = cfg.values["benchmark"]
    built = build_benchmark(
        sigs,
        moa_of,
        threshold=b["threshold"],
        per_direction=b["per_direction"],
        min_consistent=b["min_consistent"],
        pairs=pair_list,
        test_fraction=b["test_fraction"],
        policy=QualityPolicy(),
    )
    diagnostics.extend(built.diagnostics)
    bench = out_dir / "benchmark.jsonl"
    write_benchmark(built.items, bench)
    rejected = out_dir / "rejected_pairs.tsv"
    with open(rejected, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["cell_line", "compound", "reason"])
        w.writerows(built.rejected)
    diag = out_dir / "diagnostics.txt"
    diag.write_text("".join(d + "\n" for d in diagnostics))
    write_manifest(out_dir, "build-benchmark", cfg, {"conditions": conditions, "zscores": zscores, "moa": moa, "pairs": pairs}, [bench, rejected, diag], started)
    return {"items": len(built.items), "rejected": len(built.rejected), "diagnostics": len(diagnostics)}


def stage_label_de(
    cfg: Config,
    pseudobulk: Path,
    cells: Path,
    out_dir: Path,
    control_time: float = 0.0,
    fdr: float = 0.05,
    lfc: float = 0.5,
) -> dict:
    started = _now()
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        pb = de.read_pseudobulk(pseudobulk)
        cell_values = de.read_cells(cells)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    out = out_dir / "de_labels.tsv"
    diagnostics: list[str] = []
    n = 0
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["cell_line", "time_h", "gene", "u", "p", "q", "log2fc", "label"])
        for cell, t in sorted(pb):
            if t == control_time:
                continue
            ctrl_key = (cell, control_time)
            if ctrl_key not in pb or (cell, t) not in cell_values or ctrl_key not in cell_values:
                diagnostics.append(f"{cell} @ {t}h: missing control or per-cell data")
                continue
            rows = de.differential_expression(pb[(cell, t)], pb[ctrl_key], cell_values[(cell, t)], cell_values[ctrl_key], fdr, lfc, diagnostics)
            for r in rows:
                w.writerow([cell, f"{t:g}", r.gene, f"{r.u:g}", f"{r.p:.6g}", f"{r.q:.6g}", f"{r.log2fc:.6f}", r.label])
                n += 1
    diag = out_dir / "diagnostics.txt"
    diag.write_text("".join(d + "\n" for d in diagnostics))
    write_manifest(out_dir, "label-de", cfg, {"pseudobulk": pseudobulk, "cells": cells}, [out, diag], started)
    return {"genes": n}


def stage_probe(cfg: Config, benchmark: Path, out_dir: Path, provider: InteractionProvider | None = None, backend=None) -> dict:
    started = _now()
    out_dir.mkdir(parents=True, exist_ok=True)
    items = read_benchmark(benchmark)
    provider = provider or build_provider(cfg)
    backend = backend or build_backend(cfg, items, provider)
    samples = [Sample(i.cell_line, i.compound, i.moa, i.gene) for i in items]
    scores = difficulty.schedule(
        samples,
        provider,
        backend,
        trials=cfg.get("scheduler", "trials"),
        root_seed=cfg.get("run", "seed"),
        settings=call_settings(cfg),
        workers=cfg.get("run", "workers"),
    )
    out = out_dir / "scores.jsonl"
    difficulty.write_scores(scores, out)
    write_manifest(out_dir, "probe", cfg, {"benchmark": benchmark}, [out], started)
    return {"samples": len(scores)}


def order_scores(scores: Sequence[difficulty.DifficultyScore], order: str, seed: int) -> list[difficulty.DifficultyScore]:
    """Reorder within each context: ``easy-first`` (as scheduled), ``shuffled`` or ``gene``."""
    groups = engine.group_by_context(scores)
    out = []
    for ctx in sorted(groups):
        g = list(groups[ctx])
        if order == "easy-first":
            g = difficulty.sort_easy_first(g)
        elif order == "shuffled":
            random.Random(derive_seed(seed, "shuffle", ctx)).shuffle(g)
        elif order == "gene":
            g.sort(key=lambda d: d.sample.gene)
        else:
            raise ConfigError(f"unknown order {order!r}")
        out.extend(g)
    return out


def stage_run(
    cfg: Config,
    benchmark: Path,
    scores_path: Path,
    out_dir: Path,
    run_id: int = 0,
    order: str = "easy-first",
    priors_path: Path | None = None,
    provider: InteractionProvider | None = None,
    backend=None,
) -> dict:
    started = _now()
    out_dir.mkdir(parents=True, exist_ok=True)
    items = read_benchmark(benchmark)
    try:
        scores = difficulty.read_scores(scores_path)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read scores {scores_path}: {exc}") from exc
    provider = provider or build_provider(cfg)
    backend = backend or build_backend(cfg, items, provider)
    ensemble = build_ensemble(cfg, backend, provider, run_id)
    ecfg = engine.EngineConfig(
        history_cap=cfg.get("engine", "history_cap"),
        summary_cap=cfg.get("engine", "summary_cap"),
        verified_only=cfg.get("engine", "verified_only"),
    )
    priors_fn = None
    if priors_path is not None:
        table = read_priors(priors_path)

        def priors_fn(q: Query) -> NeuralPrior | None:
            return table.get((q.cell_line, q.compound, q.gene))

    ordered = order_scores(scores, order, run_seed(cfg, run_id))
    run_hash = hashlib.sha256(f"{cfg.hash()}|{order}|{run_id}".encode()).hexdigest()
    traces = engine.run_all(
        ordered,
        ensemble,
        provider,
        ecfg,
        workers=cfg.get("run", "workers"),
        state_dir=out_dir / "run_state",
        config_hash=run_hash,
        run_id=run_id,
        priors=priors_fn,
    )
    labels = {(i.cell_line, i.compound, i.gene): i.label for i in items}
    tpath = out_dir / "traces.jsonl"
    ppath = out_dir / "predictions.jsonl"
    engine.write_jsonl(traces, tpath)
    engine.write_jsonl(engine.predictions_from_traces(traces, labels), ppath)
    write_manifest(
        out_dir,
        "run",
        cfg,
        {"benchmark": benchmark, "scores": scores_path, "priors": priors_path},
        [tpath, ppath],
        started,
        {"run_id": run_id, "order": order, "run_seed": run_seed(cfg, run_id)},
    )
    return {"traces": len(traces), "verified": sum(t["verified"] for t in traces)}


def stage_evaluate(cfg: Config, predictions: Sequence[Path], categories: Path | None, out_dir: Path, label: str = "model") -> dict:
    started = _now()
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for p in predictions:
        try:
            records.extend(engine.read_jsonl(p))
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read predictions {p}: {exc}") from exc
    cats = read_categories(categories) if categories else {}
    mode = cfg.get("evaluate", "mode")
    accepted_only = cfg.get("evaluate", "accepted_only")
    results = metrics.auroc_by_category(records, cats, mode, accepted_only)
    rjson = out_dir / "report.json"
    rtxt = out_dir / "report.txt"
    rtsv = out_dir / "report.tsv"
    fig = out_dir / "auroc_by_category.png"
    doc = report.auroc_report_json(results, mode, accepted_only)
    ratios, _ = metrics.agreement_by_cell(r for r in records if not accepted_only or r.get("verified", True))
    doc["agreement_by_cell"] = ratios
    report.write_json(doc, rjson)
    rtxt.write_text(report.auroc_table_text(results, label))
    report.write_auroc_tsv(results, rtsv)
    report.plot_auroc(results, fig)
    write_manifest(out_dir, "evaluate", cfg, {f"predictions_{i}": p for i, p in enumerate(predictions)} | {"categories": categories}, [rjson, rtxt, rtsv, fig], started)
    return {"categories": len(results)}


def stage_case_study(cfg: Config, predictions: Sequence[Path], target: str, out_dir: Path, drugs: Sequence[str] | None = None) -> list[metrics.SpecificityReport]:
    started = _now()
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for p in predictions:
        try:
            records.extend(engine.read_jsonl(p))
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read predictions {p}: {exc}") from exc
    # by default, every compound that was tested in the target cell line
    drugs = list(drugs) if drugs else sorted({r["compound"] for r in records if r["cell_line"] == target})
    if not drugs:
        raise InputError(f"no predictions for target {target}")
    reports = []
    for drug in drugs:
        ratios, counts = metrics.agreement_by_cell(records, compound=drug)
        if target not in ratios:
            raise InputError(f"no labelled predictions for target {target} with {drug}")
        rep = metrics.specificity_report(drug, ratios, target, counts)
        if rep.identity_error() > 1e-9:
            raise AssertionError(f"dominance identity violated for {drug}")
        reports.append(rep)
    rjson = out_dir / "case_study.json"
    rtxt = out_dir / "case_study.txt"
    rtsv = out_dir / "case_study.tsv"
    fig = out_dir / "agreement_ratios.png"
    report.write_json({"target": target, "reports": [r.to_json() for r in reports]}, rjson)
    rtxt.write_text(report.specificity_text(reports))
    report.write_specificity_tsv(reports, rtsv)
    report.plot_specificity(reports, fig)
    write_manifest(out_dir, "case-study", cfg, {f"predictions_{i}": p for i, p in enumerate(predictions)}, [rjson, rtxt, rtsv, fig], started, {"target": target})
    return reports
