"""Command line entry point: ``pertreason <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import Config, ConfigError
from .engine import ResumeRefused, RunFailure
from .gateway import GatewayError
from .knowledge import ProviderUnavailable

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_PROVIDER = 5
EXIT_RUN = 6


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--backend", choices=["live", "scripted", "oracle"], help="LLM backend (gateway.backend)")
    p.add_argument("--script", help="scripted-backend JSONL (gateway.script)")
    p.add_argument("--seed", type=int, help="root seed (run.seed)")
    p.add_argument("--workers", type=int, help="parallel contexts (run.workers)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pertreason", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-benchmark", help="consensus signatures -> benchmark.jsonl")
    _common(p)
    p.add_argument("--conditions", type=Path, required=True)
    p.add_argument("--zscores", type=Path, required=True)
    p.add_argument("--moa", type=Path, required=True, help="compound<TAB>moa annotations")
    p.add_argument("--pairs", type=Path, help="curated cell_line<TAB>compound[<TAB>split] list")
    p.add_argument("--threshold", type=float, help="directional consistency cut (benchmark.threshold)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("label-de", help="pseudobulk Mann-Whitney labels -> de_labels.tsv")
    _common(p)
    p.add_argument("--pseudobulk", type=Path, required=True)
    p.add_argument("--cells", type=Path, required=True)
    p.add_argument("--control-time", type=float, default=0.0)
    p.add_argument("--fdr", type=float, default=0.05)
    p.add_argument("--lfc", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True)

    for name in ("probe", "sort"):
        p = sub.add_parser(name, help="self-consistency x relatedness -> scores.jsonl (easy first)")
        _common(p)
        p.add_argument("--benchmark", type=Path, required=True)
        p.add_argument("--trials", type=int, help="probe trials (scheduler.trials)")
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="progressive multi-agent run -> traces.jsonl, predictions.jsonl")
    _common(p)
    p.add_argument("--benchmark", type=Path, required=True)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--run-id", type=int, default=0)
    p.add_argument("--order", choices=["easy-first", "shuffled", "gene"], default="easy-first")
    p.add_argument("--no-history", action="store_true", help="ablation: history cap 0")
    p.add_argument("--priors", type=Path, help="optional neural prior table")
    p.add_argument("--resume", action="store_true", help="continue from run_state checkpoints in --out")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="AUROC per category -> report.{json,txt,tsv} + figure")
    _common(p)
    p.add_argument("--predictions", type=Path, nargs="+", required=True)
    p.add_argument("--categories", type=Path, help="cell_line<TAB>category mapping")
    p.add_argument("--mode", choices=["pooled", "per-perturbation"])
    p.add_argument("--accepted-only", action="store_true")
    p.add_argument("--label", default="model", help="row label in the text table")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("case-study", help="target rank / mean gap / relative dominance")
    _common(p)
    p.add_argument("--predictions", type=Path, nargs="+", required=True)
    p.add_argument("--target", required=True, help="target (sensitive) cell line")
    p.add_argument("--drug", action="append", help="restrict to these compounds (repeatable)")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _config(args) -> Config:
    cfg = Config.load(args.config)
    for o in args.overrides:
        cfg.override(o)
    for flag, section, key in (
        ("backend", "gateway", "backend"),
        ("script", "gateway", "script"),
        ("seed", "run", "seed"),
        ("workers", "run", "workers"),
        ("trials", "scheduler", "trials"),
        ("threshold", "benchmark", "threshold"),
        ("mode", "evaluate", "mode"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            if key == "script":
                val = str(Path(val).resolve())
            cfg.set(section, key, val)
    if getattr(args, "no_history", False):
        cfg.set("engine", "history_cap", 0)
    if getattr(args, "accepted_only", False):
        cfg.set("evaluate", "accepted_only", True)
    return cfg


def _dispatch(args, cfg: Config) -> str:
    cmd = args.command
    if cmd == "build-benchmark":
        r = pipeline.stage_build_benchmark(cfg, args.conditions, args.zscores, args.moa, args.out, args.pairs)
        return f"{r['items']} queries, {r['rejected']} rejected pairs, {r['diagnostics']} diagnostics"
    if cmd == "label-de":
        r = pipeline.stage_label_de(cfg, args.pseudobulk, args.cells, args.out, args.control_time, args.fdr, args.lfc)
        return f"{r['genes']} gene tests"
    if cmd in ("probe", "sort"):
        r = pipeline.stage_probe(cfg, args.benchmark, args.out)
        return f"{r['samples']} samples scored"
    if cmd == "run":
        state = args.out / "run_state"
        if state.exists() and any(state.iterdir()) and not args.resume:
            raise pipeline.InputError(f"{state} holds checkpoints; pass --resume or choose a fresh --out")
        r = pipeline.stage_run(cfg, args.benchmark, args.scores, args.out, args.run_id, args.order, args.priors)
        return f"{r['traces']} traces ({r['verified']} verified)"
    if cmd == "evaluate":
        r = pipeline.stage_evaluate(cfg, args.predictions, args.categories, args.out, args.label)
        return (args.out / "report.txt").read_text()
    if cmd == "case-study":
        pipeline.stage_case_study(cfg, args.predictions, args.target, args.out, args.drug)
        return (args.out / "case_study.txt").read_text()
    raise AssertionError(cmd)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        print(_dispatch(args, cfg))
    except (ConfigError, ResumeRefused) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.InputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ProviderUnavailable as exc:
        print(f"provider unavailable: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except RunFailure as exc:
        if isinstance(exc.cause, ProviderUnavailable):
            print(f"provider unavailable: {exc}", file=sys.stderr)
            return EXIT_PROVIDER
        print(f"run failed (checkpoint saved, rerun with --resume): {exc}", file=sys.stderr)
        return EXIT_RUN
    except GatewayError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
