"""Command-line entry point: ``llhkg <command> --config pipeline.json [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 data validation error,
3 transport failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import load_hyperred, write_corpus
from .errors import ConfigError, DataError, LLHKGError
from .evaluation import ScoreReport, render_table
from .extraction import save_prompt_spec
from .facts import export_graph
from .optimize import optimize
from .pipeline import (
    PROMPT_FILE,
    REPORT_FILE,
    TRACE_FILE,
    PipelineConfig,
    RunStore,
    build_gateway,
    build_graph,
    eval_documents,
    evaluate_run,
    final_results,
    load_documents,
    load_split,
    make_embedder,
    resolve_prompt,
    run_stages,
    save_split,
)
from .stages import Roles

logger = logging.getLogger("llhkg")

COMMANDS = ("ingest", "split", "optimize", "extract", "correct", "evaluate", "export", "run", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config file (JSON)")
    common.add_argument("--mock", action="store_true", help="serve every LLM role from mock fixtures")
    common.add_argument("--no-correct", action="store_true", help="skip the correction stage")
    common.add_argument("--limit", type=int, default=None, metavar="N", help="process only the first N documents")
    common.add_argument("--seed", type=int, default=None, help="override the split seed")
    common.add_argument("--format", choices=("json", "table"), default="table", help="report output format")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="llhkg", description="Hyper-relational knowledge graph construction with LLMs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "ingest": "convert a HyperRED file into the interchange corpus",
        "split": "write a deterministic train/dev/test split",
        "optimize": "search prompt specs on the dev split",
        "extract": "run the extraction stage",
        "correct": "run the correction stage on extracted facts",
        "evaluate": "score the latest run records",
        "export": "export the constructed graph",
        "run": "extract, correct and evaluate end to end",
        "report": "re-render a saved score report",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "ingest":
            p.add_argument("--lenient", action="store_true", help="skip invalid records instead of failing")
            p.add_argument("--input", default=None, help="HyperRED file (overrides paths.hyperred)")
        if name == "export":
            p.add_argument("--graph-format", choices=("canonical-json", "flat-tsv"), default="canonical-json")
            p.add_argument("--out", default=None, help="output file (default: work dir)")
    return parser


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config)
    if args.mock:
        config.roles = Roles(*(replace(r, mock=True) for r in
                               (config.roles.extractor, config.roles.corrector, config.roles.embedder)))
    if args.no_correct:
        config.correction_enabled = False
    if args.seed is not None:
        config.split_seed = args.seed
    if args.limit is not None and args.limit < 0:
        raise ConfigError("--limit must be non-negative")
    return config


def _emit_report(report: ScoreReport, fmt: str) -> None:
    if fmt == "json":
        sys.stdout.write(report.to_json())
    else:
        print(render_table(report))


def _prepare(config, args):
    docs = load_documents(config)
    split = load_split(config, docs)
    return docs, split


def cmd_ingest(config, args):
    source = Path(args.input) if args.input else config.hyperred
    if source is None:
        raise ConfigError("no HyperRED input: set paths.hyperred or pass --input")
    if not source.exists():
        raise DataError(f"HyperRED file not found: {source}")
    docs = load_hyperred(source, lenient=args.lenient)
    if args.limit is not None:
        docs = docs[:args.limit]
    config.corpus.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(docs, config.corpus)
    print(f"wrote {len(docs)} documents ({sum(len(d.gold) for d in docs)} gold facts) to {config.corpus}")


def cmd_split(config, args):
    from .corpus import split_dataset

    docs = load_documents(config)
    split = split_dataset(docs, config.split_seed, config.split_fractions)
    path = save_split(config, split)
    print(f"train={len(split.train)} dev={len(split.dev)} test={len(split.test)} -> {path}")


def cmd_optimize(config, args):
    docs, split = _prepare(config, args)
    gateway = build_gateway(config)
    embedder, _ = make_embedder(config, gateway)
    dev = list(split.dev)[:args.limit] if args.limit is not None else list(split.dev)
    spec, trace = optimize(split.train, dev, config.optimizer, gateway, config.roles, config.policy,
                           embedder, correct=config.correction_enabled)
    config.work_dir.mkdir(parents=True, exist_ok=True)
    save_prompt_spec(spec, config.work_dir / PROMPT_FILE)
    (config.work_dir / TRACE_FILE).write_text(trace.to_json(config.optimizer), encoding="utf-8")
    best = max(trace.best_so_far) if trace.best_so_far else float("nan")
    print(f"evaluated {len(trace.candidates)} candidates with {trace.chat_calls} chat calls; "
          f"best dev soft F1 {best:.4f} ({trace.best_id}) -> {config.work_dir / PROMPT_FILE}")


def cmd_extract(config, args):
    docs, split = _prepare(config, args)
    targets = eval_documents(config, docs, split, args.limit)
    gateway = build_gateway(config)
    done = run_stages(config, targets, resolve_prompt(config, split), gateway, RunStore(config.work_dir),
                      extract=True, correct=False)
    print(f"extracted {len(done)} documents ({len(targets) - len(done)} already done)")


def cmd_correct(config, args):
    if not config.correction_enabled:
        raise ConfigError("correction is disabled (--no-correct)")
    docs, split = _prepare(config, args)
    targets = eval_documents(config, docs, split, args.limit)
    gateway = build_gateway(config)
    done = run_stages(config, targets, resolve_prompt(config, split), gateway, RunStore(config.work_dir),
                      extract=False, correct=True)
    print(f"corrected {len(done)} documents ({len(targets) - len(done)} already done)")


def _evaluate(config, args, targets):
    gateway = build_gateway(config) if not config.roles.embedder.mock else None
    embedder, embedder_id = make_embedder(config, gateway)
    report = evaluate_run(config, targets, RunStore(config.work_dir), embedder, embedder_id,
                          correct=config.correction_enabled)
    (config.work_dir / REPORT_FILE).write_text(report.to_json(), encoding="utf-8")
    _emit_report(report, args.format)
    return report


def cmd_evaluate(config, args):
    docs, split = _prepare(config, args)
    _evaluate(config, args, eval_documents(config, docs, split, args.limit))


def cmd_run(config, args):
    docs, split = _prepare(config, args)
    targets = eval_documents(config, docs, split, args.limit)
    gateway = build_gateway(config)
    store = RunStore(config.work_dir)
    done = run_stages(config, targets, resolve_prompt(config, split), gateway, store,
                      extract=True, correct=config.correction_enabled)
    logger.info("processed %d documents, %d resumed from earlier records", len(done), len(targets) - len(done))
    _evaluate(config, args, targets)


def cmd_export(config, args):
    docs, split = _prepare(config, args)
    targets = eval_documents(config, docs, split, args.limit)
    results = final_results(config, targets, RunStore(config.work_dir), config.correction_enabled)
    data = export_graph(build_graph(results), args.graph_format)
    suffix = "json" if args.graph_format == "canonical-json" else "tsv"
    out = Path(args.out) if args.out else config.work_dir / f"graph.{suffix}"
    out.write_bytes(data)
    print(f"wrote {out}")


def cmd_report(config, args):
    path = config.work_dir / REPORT_FILE
    if not path.exists():
        raise DataError(f"no saved report at {path}")
    try:
        report = ScoreReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: unreadable report ({exc})") from None
    _emit_report(report, args.format)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = globals()[f"cmd_{args.command}"]
    try:
        handler(_load_config(args), args)
    except LLHKGError as exc:
        print(f"llhkg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"llhkg {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
