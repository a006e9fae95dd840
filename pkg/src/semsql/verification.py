"""Diagnose -> Retrieve -> Correct refinement of draft triples."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict

from .errors import (
    ConstraintViolation,
    EmptyEvidence,
    LLMError,
    MalformedResponse,
    SqlParseError,
    Uncorrectable,
    UnsupportedDialect,
)
from .introspect import DatabaseSchema, ExecutionResult, execute_readonly
from .kb import ERROR_TYPES, Evidence, EvidenceQuery, KnowledgeBase, retrieve
from .llm import JUDGE_TEMPERATURE, ChatRequest, Gateway
from .sqlanalysis import SqlFacts, extract_facts
from .synthesis import RationaleTrace, RefinementEntry, Triple, extract_sql, validate_trace

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 3
DEFAULT_TIMEOUT = 5.0
# diagnoses that license rewording the question
QUESTION_EDIT_ERRORS = frozenset({"aggregation_type_mismatch", "trace_sql_divergence"})
SQL_LOCATION = "sql"


@dataclass
class DiagnosedError:
    error_type: str
    detail: str
    trace_location: str = SQL_LOCATION
    table: str | None = None
    column: str | None = None
    tables: tuple[str, ...] = ()

    def __post_init__(self):
        if self.error_type not in ERROR_TYPES:
            raise ValueError(f"unknown error type {self.error_type!r}")

    def query(self) -> EvidenceQuery:
        return EvidenceQuery(self.error_type, self.table, self.column, self.tables)

    def to_dict(self) -> dict:
        return {"type": self.error_type, "detail": self.detail, "location": self.trace_location}


@dataclass
class DiagnosisReport:
    errors: list[DiagnosedError] = field(default_factory=list)
    execution: ExecutionResult = field(default_factory=lambda: ExecutionResult(False))
    warnings: list[str] = field(default_factory=list)
    facts: SqlFacts | None = None

    @property
    def clean(self) -> bool:
        return not self.errors

    @property
    def error_types(self) -> set[str]:
        return {e.error_type for e in self.errors}

    def signature(self) -> tuple:
        return tuple(sorted((e.error_type, e.detail) for e in self.errors))

    def to_dict(self) -> dict:
        return {
            "errors": [e.to_dict() for e in self.errors],
            "execution": self.execution.to_dict(),
            "warnings": list(self.warnings),
        }


def _column_location(trace: RationaleTrace, column: str) -> str:
    idx = trace.column_index(column)
    return SQL_LOCATION if idx is None else f"column_selection.columns_used[{idx}]"


def diagnose(
    triple: Triple,
    kb: KnowledgeBase,
    db_path: str | Path,
    schema: DatabaseSchema,
    timeout: float = DEFAULT_TIMEOUT,
) -> DiagnosisReport:
    """Check a triple against the schema, the knowledge base and the live database.

    Checks run in order: parse, schema/K4 existence, joins against K6, read-only
    execution, aggregation compatibility (K3/K4), and trace/SQL table agreement.
    A missing database file raises instead of producing a diagnosis.
    """
    if not kb.complete:
        raise ValueError("diagnose requires a complete knowledge base")
    report = DiagnosisReport()
    trace = triple.rationale

    try:
        facts = extract_facts(triple.sql, schema)
    except (SqlParseError, UnsupportedDialect) as exc:
        report.errors.append(DiagnosedError("not_executable", f"parse: {exc}"))
        report.execution = ExecutionResult(False, error=f"not parsed: {exc}")
        return report
    report.facts = facts

    # existence against schema and K4
    for table in sorted(facts.tables):
        if schema.table(table) is None:
            idx = trace.table_index(table)
            loc = SQL_LOCATION if idx is None else f"table_selection.tables_used[{idx}]"
            report.errors.append(DiagnosedError(
                "invalid_table", f"table {table!r} does not exist", loc, table=table, tables=(table,)))
    for table, column in sorted(facts.columns):
        if schema.table(table) is None:
            continue
        if schema.resolve_column(table, column) is None or kb.column_semantics(table, column) is None:
            report.errors.append(DiagnosedError(
                "invalid_column", f"column {table}.{column} does not exist",
                _column_location(trace, column), table=table, column=column, tables=(table,)))
    for qualifier, column in sorted(facts.unresolved, key=lambda x: (x[0] or "", x[1])):
        ref = f"{qualifier}.{column}" if qualifier else column
        report.errors.append(DiagnosedError(
            "invalid_column", f"column reference {ref} does not resolve",
            _column_location(trace, column), column=column,
            tables=tuple(sorted(t for t in facts.tables if schema.table(t)))))

    # joins against K6: declared FK edges are authoritative, inferred edges only warn
    edges = kb.k6_relations.join_edges
    for cond in facts.join_conditions:
        if schema.resolve_column(*cond.left) is None or schema.resolve_column(*cond.right) is None:
            continue
        matches = [e for e in edges if e.connects(cond.left, cond.right)]
        text = f"{cond.left[0]}.{cond.left[1]} {cond.operator} {cond.right[0]}.{cond.right[1]}"
        if any(not e.inferred for e in matches):
            continue
        if matches:
            report.warnings.append(f"join {text} relies on an inferred relation")
            continue
        report.errors.append(DiagnosedError(
            "join_inconsistency", f"join {text} matches no foreign-key relation", "sql_strategy",
            tables=tuple(sorted({cond.left[0], cond.right[0]}))))

    report.execution = execute_readonly(db_path, triple.sql, timeout)
    if not report.execution.success:
        report.errors.append(DiagnosedError(
            "not_executable", report.execution.error or "execution failed",
            tables=tuple(sorted(t for t in facts.tables if schema.table(t)))))

    # aggregation compatibility: SUM/AVG need quantitative, MIN/MAX quantitative or temporal
    for agg in facts.aggregations:
        if agg.ref is None or agg.function in ("COUNT", "GROUP_CONCAT"):
            continue
        ft = kb.field_type(*agg.ref)
        sem = kb.column_semantics(*agg.ref)
        if ft is None or sem is None:
            continue
        fn = "sum" if agg.function == "TOTAL" else agg.function.lower()
        if fn in ("sum", "avg"):
            ok = ft.semantic_category == "quantitative"
        else:
            ok = ft.semantic_category in ("quantitative", "temporal")
        if ok and fn not in sem.allowed_operations:
            ok = False
        if not ok:
            report.errors.append(DiagnosedError(
                "aggregation_type_mismatch",
                f"{agg.function}({agg.table}.{agg.column}) on a column typed {ft.semantic_category}",
                _column_location(trace, agg.column) if trace.column_index(agg.column) is not None
                else "sql_strategy",
                table=agg.table, column=agg.column, tables=(agg.table,)))

    traced = {t.lower() for t in trace.table_selection.tables_used}
    used = {t.lower() for t in facts.tables}
    if traced != used:
        report.errors.append(DiagnosedError(
            "trace_sql_divergence",
            f"trace selects {sorted(traced)} but SQL reads {sorted(used)}",
            "table_selection.tables_used",
            tables=tuple(sorted(set(trace.table_selection.tables_used) | facts.tables))))
    return report


def gather_evidence(report: DiagnosisReport, kb: KnowledgeBase) -> Evidence:
    """Union of evidence for every error; errors with nothing relevant contribute nothing."""
    evidence = Evidence()
    for err in report.errors:
        try:
            evidence.extend(retrieve(kb, err.query()))
        except EmptyEvidence:
            logger.info("no evidence for %s", err.error_type)
    return evidence


class Correction(BaseModel):
    model_config = ConfigDict(extra="ignore")

    question: str
    sql: str
    think: RationaleTrace
    corrections: list[str] = []


_CORRECTION_SHAPE = (
    '{"question": str, "sql": str, "think": {...same structure as the input trace...}, '
    '"corrections": [str]}'
)


def correction_request(triple: Triple, report: DiagnosisReport, evidence: Evidence) -> ChatRequest:
    may_edit_question = bool(report.error_types & QUESTION_EDIT_ERRORS)
    system = (
        "[correct] You repair a text-to-SQL training sample. Fix every diagnosed error using the "
        "evidence: replace invalid schema elements with valid ones and keep correct reasoning "
        "steps. "
        + ("You may reword the question if the original asks for something the data cannot "
           "meaningfully answer. " if may_edit_question else "Keep the question unchanged. ")
        + "List each applied change in corrections.\n"
        f"Answer with one JSON object of the form:\n{_CORRECTION_SHAPE}"
    )
    payload = {
        "question": triple.question,
        "sql": triple.sql,
        "think": triple.rationale.to_think(),
        "errors": [e.to_dict() for e in report.errors],
        "evidence": [e.to_dict() for e in evidence.entries],
        "may_edit_question": may_edit_question,
    }
    user = "INPUT\n" + json.dumps(payload, ensure_ascii=False, sort_keys=True)
    return ChatRequest(system, user, temperature=JUDGE_TEMPERATURE,
                       response_schema_tag="structured_record")


def correct(
    triple: Triple,
    report: DiagnosisReport,
    evidence: Evidence,
    kb: KnowledgeBase,
    gateway: Gateway,
    schema: DatabaseSchema,
) -> Triple:
    """One correction call. Appends a refinement-log entry for this iteration."""
    if not report.errors:
        raise ValueError("correct requires a non-empty error list")
    fix = gateway.complete_structured(correction_request(triple, report, evidence), Correction)
    sql = extract_sql(fix.sql)
    if not sql:
        raise MalformedResponse("corrector returned empty SQL", fix.sql)
    question = triple.question
    if report.error_types & QUESTION_EDIT_ERRORS and fix.question.strip():
        question = fix.question.strip()
    prior_log = list(triple.rationale.refinement_log)
    entry = RefinementEntry(
        iteration=len(prior_log) + 1,
        errors=[e.to_dict() for e in report.errors],
        corrections=list(fix.corrections) or [f"sql: {triple.sql} -> {sql}"],
    )
    trace = fix.think.model_copy(update={"refinement_log": prior_log + [entry]})
    level = triple.spec.level if triple.spec else None
    validate_trace(trace, schema, level)
    return Triple(question=question, sql=sql, rationale=trace, status="draft",
                  sample_id=triple.sample_id, spec=triple.spec, notes=dict(triple.notes))


@dataclass
class RefinementOutcome:
    triple: Triple
    iterations_used: int
    terminal: str  # clean | max_iterations | uncorrectable
    report: DiagnosisReport

    def __post_init__(self):
        if self.terminal == "clean" and not self.report.clean:
            raise ValueError("terminal=clean requires an empty final diagnosis")


class AuditLog:
    """Append-only JSONL, one record per (sample_id, iteration)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, sample_id: str, iteration: int, report: DiagnosisReport,
              evidence: Evidence | None = None, **extra: Any) -> None:
        record = {"sample_id": sample_id, "iteration": iteration, "diagnosis": report.to_dict(),
                  "evidence": evidence.to_dict()["entries"] if evidence else [], **extra}
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(l) for l in self.path.read_text(encoding="utf-8").splitlines() if l]


def refine(
    triple: Triple,
    kb: KnowledgeBase,
    db_path: str | Path,
    gateway: Gateway,
    schema: DatabaseSchema,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    audit: AuditLog | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> RefinementOutcome:
    """Iterate diagnose -> retrieve -> correct until clean, capped, or stuck.

    At most ``max_iterations`` correction calls are made. The corrector is
    considered stuck when it returns a SQL string it already returned for the
    same error set.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be positive")
    if triple.status != "draft":
        raise ValueError(f"refine expects a draft, got status {triple.status!r}")
    current = replace(triple, notes=dict(triple.notes))
    returned: dict[tuple, set[str]] = {}
    k = 0
    while True:
        report = diagnose(current, kb, db_path, schema, timeout)
        if report.clean:
            if audit:
                audit.write(current.sample_id, k, report, terminal="clean")
            current.status = "verified"
            return RefinementOutcome(current, k, "clean", report)
        if k >= max_iterations:
            if audit:
                audit.write(current.sample_id, k, report, terminal="max_iterations")
            current.status = "rejected"
            current.notes["last_diagnosis"] = report.to_dict()
            return RefinementOutcome(current, k, "max_iterations", report)
        evidence = gather_evidence(report, kb)
        if audit:
            audit.write(current.sample_id, k, report, evidence)
        try:
            fixed = correct(current, report, evidence, kb, gateway, schema)
            k += 1
            seen = returned.setdefault(report.signature(), set())
            if fixed.sql.strip() in seen:
                raise Uncorrectable("corrector repeated a SQL for the same errors")
            seen.add(fixed.sql.strip())
        except (Uncorrectable, MalformedResponse, ConstraintViolation) as exc:
            if not isinstance(exc, Uncorrectable):
                k += 1
            logger.info("sample %s uncorrectable: %s", current.sample_id, exc)
            current.status = "rejected"
            current.notes["last_diagnosis"] = report.to_dict()
            current.notes["rejection"] = str(exc)
            return RefinementOutcome(current, k, "uncorrectable", report)
        current = fixed
