"""Command-line entry point: one subcommand per pipeline stage plus helpers."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .errors import ConfigInvalid, SemSqlError, SqlParseError, StageFailed, UnsupportedDialect
from .introspect import introspect
from .metrics import contamination_filter, evaluate_corpus, load_eval_set
from .pipeline import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_STAGE_FAILURE,
    Pipeline,
    RunConfig,
    build_gateway,
    exit_code,
    load_config,
)
from .sqlanalysis import classify_sql
from .synthesis import RationaleTrace, Triple

STAGE_COMMANDS = {
    "introspect": "introspect",
    "build-kb": "build_kb",
    "plan": "plan",
    "generate": "generate",
    "refine": "refine",
    "filter": "filter",
    "export": "export",
}


def _read_corpus(path: str) -> list[Triple]:
    triples = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            t = Triple.from_record(rec)
        except ValidationError:
            # external corpora may carry free-form think blocks; evaluation only reads question and SQL
            t = Triple(rec["question"], rec["answer"], RationaleTrace.model_construct())
        if not t.sample_id:
            t.sample_id = f"line{i:05d}"
        t.status = "verified"
        triples.append(t)
    return triples


def _cmd_stage(args) -> int:
    config = load_config(args.config)
    pipe = Pipeline(config)
    pipe.run_stage(STAGE_COMMANDS[args.command])
    if args.command == "export":
        print(f"exported {pipe.manifest.export_count} record(s) to {pipe.export_path}")
        return exit_code(pipe.manifest)
    print(json.dumps(pipe.manifest.counters, sort_keys=True))
    return EXIT_OK


def _cmd_pipeline(args) -> int:
    config = load_config(args.config)
    pipe = Pipeline(config)
    manifest = pipe.run()
    print(json.dumps({"run_id": manifest.run_id, "counters": manifest.counters,
                      "export_count": manifest.export_count,
                      "export": str(pipe.export_path)}, sort_keys=True))
    return exit_code(manifest)


def _cmd_evaluate(args) -> int:
    if args.corpus is None:
        if args.config is None:
            raise ConfigInvalid("evaluate needs --config or --corpus with --db")
        config = load_config(args.config)
        pipe = Pipeline(config)
        pipe.run_stage("evaluate")
        report_txt = pipe.path("report.txt")
        print(report_txt.read_text(encoding="utf-8") if report_txt.exists() else "empty corpus")
        return EXIT_OK
    if args.db is None:
        raise ConfigInvalid("--corpus requires --db")
    corpus = _read_corpus(args.corpus)
    removed = []
    if args.eval_set:
        corpus, removed = contamination_filter(corpus, load_eval_set(args.eval_set),
                                               args.ngram_n, args.ngram_threshold)
    if not corpus:
        print("no samples left to evaluate")
        return EXIT_STAGE_FAILURE
    gateway = None
    if args.with_sa or args.embedder == "provider":
        if args.config is None:
            raise ConfigInvalid("--with-sa and --embedder provider need --config for the provider")
        gateway = build_gateway(load_config(args.config))
    schema = introspect(args.db)
    report = evaluate_corpus(corpus, args.db, schema, gateway if args.with_sa else None,
                             gateway.embed if args.embedder == "provider" else None)
    report.filter_params = {"n": args.ngram_n, "threshold": args.ngram_threshold,
                            "eval_set": args.eval_set, "removed": len(removed)}
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return EXIT_OK


def _cmd_classify(args) -> int:
    schema = introspect(args.db) if args.db else None
    status = EXIT_OK
    for line in sys.stdin:
        sql = line.strip()
        if not sql:
            continue
        try:
            print(json.dumps(classify_sql(sql, schema).to_dict()))
        except (SqlParseError, UnsupportedDialect) as exc:
            print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}))
            status = EXIT_STAGE_FAILURE
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semsql", description="Knowledge-grounded text-to-SQL data synthesis.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage of a configured run")
        p.add_argument("--config", required=True, help="run config (YAML or JSON)")
        p.set_defaults(func=_cmd_stage)

    p = sub.add_parser("pipeline", help="run every stage, resuming a previous run in the same run_dir")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("evaluate", help="report SER, SA, complexity and diversity")
    p.add_argument("--config", help="run config; evaluates the run's filtered corpus when --corpus is absent")
    p.add_argument("--corpus", help="JSONL corpus in export format")
    p.add_argument("--db", help="SQLite database the corpus targets")
    p.add_argument("--eval-set", help="JSONL/JSON eval pairs for the contamination filter")
    p.add_argument("--ngram-n", type=int, default=8)
    p.add_argument("--ngram-threshold", type=float, default=0.6)
    p.add_argument("--with-sa", action="store_true", help="run the LLM consistency judge")
    p.add_argument("--embedder", choices=("offline", "provider"), default="offline")
    p.add_argument("--out", help="write the report as JSON here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("classify", help="read SQL lines on stdin, print complexity JSONL")
    p.add_argument("--db", help="optional database for column resolution")
    p.set_defaults(func=_cmd_classify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except StageFailed as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    except SemSqlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
