"""Trace-grounded draft generation: question + rationale first, then SQL."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from pydantic import BaseModel, ConfigDict, Field

from .errors import ConstraintViolation, EmptyVocabulary, MalformedResponse, NonSelectOutput
from .introspect import DatabaseSchema
from .kb import KnowledgeBase
from .llm import GENERATION_TEMPERATURE, ChatRequest, Gateway, extract_fenced
from .sqlanalysis import Level, is_select_statement

logger = logging.getLogger(__name__)

DEFAULT_DOMAIN_CONTEXTS = ("sales", "education")
DEFAULT_TASK_TYPES = ("trend_analysis", "ranking")


# -- rationale trace ------------------------------------------------------------

class _Record(BaseModel):
    model_config = ConfigDict(extra="ignore")


class TraceMetadata(_Record):
    main_scenario: str = ""
    sub_scenario: str = ""
    complexity_level: int
    use_case: str = ""


class TableSelection(_Record):
    tables_used: list[str]
    reasoning: str = ""


class ColumnUse(_Record):
    name: str
    type: str = ""
    operation: str = ""
    purpose: str = ""


class ColumnSelection(_Record):
    columns_used: list[ColumnUse] = []


class SqlStrategy(_Record):
    operations: list[str] = []
    approach: str = ""
    no_need: list[str] = []


class RefinementEntry(_Record):
    iteration: int
    errors: list[dict[str, Any]] = []
    corrections: list[str] = []


class RationaleTrace(_Record):
    focus: str = ""
    metadata: TraceMetadata
    table_selection: TableSelection
    column_selection: ColumnSelection = Field(default_factory=ColumnSelection)
    sql_strategy: SqlStrategy = Field(default_factory=SqlStrategy)
    expected_output: str = ""
    refinement_log: list[RefinementEntry] = []

    def to_think(self) -> dict:
        """Serialized ``think`` block; the refinement log is omitted while empty."""
        data = self.model_dump(mode="json")
        if not data["refinement_log"]:
            del data["refinement_log"]
        return data

    def resolve_path(self, path: str) -> Any:
        """Follow a dotted path with ``[i]`` indexes, e.g. ``column_selection.columns_used[1]``."""
        node: Any = self.model_dump(mode="json")
        for part in path.split("."):
            name, _, rest = part.partition("[")
            if name:
                node = node[name]
            while rest:
                idx, _, rest = rest.partition("]")
                node = node[int(idx)]
                rest = rest.lstrip("[")
        return node

    def column_index(self, column: str) -> int | None:
        low = column.lower()
        for i, cu in enumerate(self.column_selection.columns_used):
            name = cu.name.lower()
            if name == low or name.split(".")[-1] == low:
                return i
        return None

    def table_index(self, table: str) -> int | None:
        low = table.lower()
        for i, t in enumerate(self.table_selection.tables_used):
            if t.lower() == low:
                return i
        return None


def validate_trace(trace: RationaleTrace, schema: DatabaseSchema, level: Level | None = None) -> None:
    """Raise ConstraintViolation unless the trace only names schema tables/columns.

    Column names may be bare or ``table.column``; bare names must exist in one
    of ``tables_used``.
    """
    used = []
    for name in trace.table_selection.tables_used:
        t = schema.table(name)
        if t is None:
            raise ConstraintViolation(f"trace uses unknown table {name!r}")
        used.append(t)
    if not used:
        raise ConstraintViolation("trace selects no tables")
    for cu in trace.column_selection.columns_used:
        if "." in cu.name:
            tname, cname = cu.name.split(".", 1)
            if not any(t.name.lower() == tname.lower() and t.column(cname) for t in used):
                raise ConstraintViolation(f"trace column {cu.name!r} not in tables_used")
        elif not any(t.column(cu.name) for t in used):
            raise ConstraintViolation(f"trace column {cu.name!r} not in tables_used")
    if level is not None and trace.metadata.complexity_level != int(level):
        raise ConstraintViolation(
            f"trace declares complexity_level {trace.metadata.complexity_level}, target is {int(level)}")


# -- generation spec & triple --------------------------------------------------

@dataclass(frozen=True)
class GenerationSpec:
    domain_context: str
    task_type: str
    level: Level
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "level", Level.parse(self.level))

    def to_dict(self) -> dict:
        return {"domain_context": self.domain_context, "task_type": self.task_type,
                "level": int(self.level), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> GenerationSpec:
        return cls(data["domain_context"], data["task_type"], Level.parse(data["level"]), data.get("seed", 0))

    def sample_id(self, index: int) -> str:
        digest = hashlib.sha1(json.dumps([index, self.to_dict()], sort_keys=True).encode()).hexdigest()
        return f"s{index:05d}-{digest[:8]}"


@dataclass
class Triple:
    question: str
    sql: str
    rationale: RationaleTrace
    status: str = "draft"
    sample_id: str = ""
    spec: Optional[GenerationSpec] = None
    notes: dict[str, Any] = field(default_factory=dict)

    def to_record(self, include_meta: bool = True) -> dict:
        record: dict[str, Any] = {"question": self.question, "think": self.rationale.to_think(),
                                  "answer": self.sql}
        if include_meta:
            record["meta"] = {
                "sample_id": self.sample_id,
                "status": self.status,
                "spec": self.spec.to_dict() if self.spec else None,
                **({"notes": self.notes} if self.notes else {}),
            }
        return record

    @classmethod
    def from_record(cls, record: dict) -> Triple:
        meta = record.get("meta") or {}
        spec = meta.get("spec")
        return cls(
            question=record["question"],
            sql=record["answer"],
            rationale=RationaleTrace.model_validate(record["think"]),
            status=meta.get("status", "draft"),
            sample_id=meta.get("sample_id", ""),
            spec=GenerationSpec.from_dict(spec) if spec else None,
            notes=dict(meta.get("notes") or {}),
        )


def dump_record(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def append_spool(path: str | Path, triples: Iterable[Triple]) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(dump_record(t.to_record()) + "\n")


def read_spool(path: str | Path) -> list[Triple]:
    p = Path(path)
    if not p.exists():
        return []
    with open(p, encoding="utf-8") as fh:
        return [Triple.from_record(json.loads(line)) for line in fh if line.strip()]


# -- planning ------------------------------------------------------------------

def plan_batch(
    vocab_contexts: list[str],
    vocab_tasks: list[str],
    level_quotas: dict,
    seed: int = 0,
) -> list[GenerationSpec]:
    """Expand level quotas into specs, cycling (context, task) pairs within each level.

    Pairs are enumerated context-major; each spec gets seed ``seed + position``.
    """
    quotas = {Level.parse(k): int(v) for k, v in level_quotas.items()}
    if any(v < 0 for v in quotas.values()):
        raise ValueError("level quotas must be non-negative")
    total = sum(quotas.values())
    if total == 0:
        return []
    if not vocab_contexts or not vocab_tasks:
        raise EmptyVocabulary("domain context and task type vocabularies must be non-empty")
    pairs = [(c, t) for c in vocab_contexts for t in vocab_tasks]
    specs = []
    for level in sorted(quotas):
        for i in range(quotas[level]):
            c, t = pairs[i % len(pairs)]
            specs.append(GenerationSpec(c, t, level, seed + len(specs)))
    return specs


# -- prompts -------------------------------------------------------------------

LEVEL_GUIDE = {
    Level.L1: "Level 1: one table; filtering, sorting, LIMIT, DISTINCT, simple aggregation.",
    Level.L2: "Level 2: joins across 2-3 tables combined with GROUP BY, HAVING or COUNT/SUM/AVG.",
    Level.L3: "Level 3: subqueries (IN, EXISTS, correlated), CASE WHEN, UNION, or 4+ tables.",
    Level.L4: "Level 4: window functions (ROW_NUMBER, RANK, LAG, LEAD), CTEs (WITH) or recursive queries.",
}

_TRACE_SHAPE = (
    '{"question": str, "think": {"focus": str, "metadata": {"main_scenario": str, '
    '"sub_scenario": str, "complexity_level": int, "use_case": str}, "table_selection": '
    '{"tables_used": [str], "reasoning": str}, "column_selection": {"columns_used": '
    '[{"name": str, "type": str, "operation": str, "purpose": str}]}, "sql_strategy": '
    '{"operations": [str], "approach": str, "no_need": [str]}, "expected_output": str}}'
)


class QuestionDraft(_Record):
    question: str
    think: RationaleTrace


def kb_guidance(kb: KnowledgeBase, tables: list[str] | None = None) -> dict:
    """Column operation constraints and business rules, optionally restricted to ``tables``."""
    keep = {t.lower() for t in tables} if tables else None
    columns = []
    for sem in kb.k4_columns.columns:
        if keep is not None and sem.table.lower() not in keep:
            continue
        ft = kb.field_type(sem.table, sem.column)
        meta = kb.column_meta(sem.table, sem.column)
        columns.append({
            "column": f"{sem.table}.{sem.column}",
            "category": ft.semantic_category if ft else None,
            "allowed_operations": sem.allowed_operations,
            "meaning": sem.meaning or (meta.description if meta else ""),
        })
    rules = [
        {"rule_id": r.rule_id, "statement": r.statement}
        for r in kb.k2_domain.business_rules
        if keep is None or not r.affected_tables or keep & {t.lower() for t in r.affected_tables}
    ]
    edges = [
        {"join": f"{e.from_table}.{e.from_column} = {e.to_table}.{e.to_column}",
         "cardinality": e.cardinality, "declared": not e.inferred}
        for e in kb.k6_relations.join_edges
        if keep is None or (e.from_table.lower() in keep or e.to_table.lower() in keep)
    ]
    tables_info = [
        {"table": m.table, "description": m.description,
         "role": next((r.role for r in kb.k5_tables.tables if r.table == m.table), None)}
        for m in kb.k1_metadata.tables if keep is None or m.table.lower() in keep
    ]
    return {"domain": kb.k2_domain.domain_name, "tables": tables_info, "columns": columns,
            "business_rules": rules, "join_edges": edges}


def question_request(kb: KnowledgeBase, spec: GenerationSpec) -> ChatRequest:
    system = (
        "[generate_question] You write natural-language questions over a relational database "
        "together with a structured reasoning trace. Use only the listed tables and columns, "
        "apply only allowed operations to each column, and respect every business rule.\n"
        f"Target complexity: {LEVEL_GUIDE[spec.level]}\n"
        f"Answer with one JSON object of the form:\n{_TRACE_SHAPE}"
    )
    payload = {
        "scenario": {"domain_context": spec.domain_context, "task_type": spec.task_type},
        "complexity_level": int(spec.level),
        "variation_seed": spec.seed,
        "knowledge": kb_guidance(kb),
    }
    user = "INPUT\n" + json.dumps(payload, ensure_ascii=False, sort_keys=True)
    return ChatRequest(system, user, temperature=GENERATION_TEMPERATURE,
                       response_schema_tag="structured_record")


def sql_request(question: str, trace: RationaleTrace, spec: GenerationSpec, kb: KnowledgeBase) -> ChatRequest:
    system = (
        "[generate_sql] You write one SQLite SELECT statement that answers the question by "
        "following the reasoning trace exactly. Reply with the SQL only, optionally in a "
        "```sql fenced block."
    )
    payload = {
        "question": question,
        "think": trace.to_think(),
        "scenario": {"domain_context": spec.domain_context, "task_type": spec.task_type},
        "complexity_level": int(spec.level),
        "knowledge": kb_guidance(kb, trace.table_selection.tables_used),
    }
    user = "INPUT\n" + json.dumps(payload, ensure_ascii=False, sort_keys=True)
    return ChatRequest(system, user, temperature=GENERATION_TEMPERATURE)


def generate_question(
    kb: KnowledgeBase,
    spec: GenerationSpec,
    gateway: Gateway,
    schema: DatabaseSchema,
) -> tuple[str, RationaleTrace]:
    if not kb.complete:
        raise ValueError("generation requires a complete knowledge base")
    draft = gateway.complete_structured(question_request(kb, spec), QuestionDraft)
    trace = draft.think.model_copy(update={"refinement_log": []})
    validate_trace(trace, schema, spec.level)
    if not draft.question.strip():
        raise ConstraintViolation("empty question")
    return draft.question.strip(), trace


def extract_sql(text: str) -> str:
    """Strip a fenced block if present and return the statement text."""
    fenced = extract_fenced(text, ("sql", "sqlite"))
    sql = fenced if fenced is not None else text
    return sql.strip()


def generate_sql(
    question: str,
    trace: RationaleTrace,
    spec: GenerationSpec,
    kb: KnowledgeBase,
    gateway: Gateway,
) -> str:
    resp = gateway.complete(sql_request(question, trace, spec, kb))
    sql = extract_sql(resp.text)
    if not sql:
        raise MalformedResponse("empty SQL reply", resp.text)
    if not is_select_statement(sql):
        raise NonSelectOutput(f"generator returned a non-SELECT statement: {sql[:80]!r}")
    return sql


def generate_draft(
    kb: KnowledgeBase,
    spec: GenerationSpec,
    gateway: Gateway,
    schema: DatabaseSchema,
    sample_id: str,
) -> Triple:
    """Both generation calls for one spec. Trace problems reject before SQL is requested."""
    question, trace = generate_question(kb, spec, gateway, schema)
    sql = generate_sql(question, trace, spec, kb, gateway)
    return Triple(question, sql, trace, status="draft", sample_id=sample_id, spec=spec)


def iter_specs(specs: list[GenerationSpec]) -> Iterator[tuple[str, GenerationSpec]]:
    for i, spec in enumerate(specs):
        yield spec.sample_id(i), spec
