"""Six-layer semantic knowledge base: staged extraction, persistence, evidence lookup.

Layers, in build order:

    K1 metadata            table/column descriptions
    K2 domain constraints  business rules
    K3 field types         semantic category per column
    K4 column semantics    meaning and allowed operations per column
    K5 table constraints   entity role and intra-table rules per table
    K6 relations           join edges and cross-table dependencies

Each stage is one LLM call whose prompt carries only that stage's declared
inputs (``STAGE_INPUTS``); later layers present in the partial KB are ignored.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict

from .errors import EmptyEvidence, MissingPriorLayer, UnknownErrorType, ValidationFailure
from .introspect import DatabaseSchema, InstanceSample
from .llm import JUDGE_TEMPERATURE, ChatRequest, Gateway

logger = logging.getLogger(__name__)

SEMANTIC_CATEGORIES = ("identifier", "categorical", "quantitative", "temporal", "free_text")
OPERATIONS = ("select", "filter", "group", "order", "sum", "avg", "min", "max", "count")
ENTITY_ROLES = ("primary_entity", "domain_attribute", "metadata_entity")
CARDINALITIES = ("1:1", "1:N", "N:M")

LAYER_NAMES = {
    1: "k1_metadata",
    2: "k2_domain",
    3: "k3_field_types",
    4: "k4_columns",
    5: "k5_tables",
    6: "k6_relations",
}
STAGE_INPUTS: dict[int, tuple[str, ...]] = {
    1: ("schema", "sample"),
    2: ("schema", "k1"),
    3: ("k1", "sample"),
    4: ("k1", "k2", "k3"),
    5: ("k1", "k2", "k3", "k4"),
    6: ("k3", "k4", "k5", "foreign_keys"),
}

_CATEGORY_SYNONYMS = {
    "id": "identifier", "key": "identifier", "code": "identifier",
    "category": "categorical", "cd": "categorical", "enum": "categorical",
    "numeric": "quantitative", "number": "quantitative", "measure": "quantitative",
    "qi": "quantitative", "metric": "quantitative",
    "date": "temporal", "datetime": "temporal", "time": "temporal", "timestamp": "temporal",
    "text": "free_text", "freetext": "free_text", "string": "free_text",
}
_OPERATION_SYNONYMS = {
    "where": "filter", "groupby": "group", "group_by": "group", "orderby": "order",
    "order_by": "order", "sort": "order", "average": "avg", "projection": "select",
}
_CARDINALITY_SYNONYMS = {
    "1:n": "1:N", "n:1": "1:N", "one_to_many": "1:N", "many_to_one": "1:N",
    "1:1": "1:1", "one_to_one": "1:1", "n:m": "N:M", "m:n": "N:M", "many_to_many": "N:M",
}


def _norm_token(value: str) -> str:
    return "_".join(value.strip().lower().replace("-", " ").split())


# -- layer records ---------------------------------------------------------

class _Record(BaseModel):
    model_config = ConfigDict(extra="ignore")


class TableMeta(_Record):
    table: str
    description: str = ""
    row_count_estimate: Optional[int] = None


class ColumnMeta(_Record):
    table: str
    column: str
    description: str = ""


class MetadataLayer(_Record):
    tables: list[TableMeta] = []
    columns: list[ColumnMeta] = []


class BusinessRule(_Record):
    rule_id: str
    statement: str
    affected_tables: list[str] = []
    affected_columns: list[str] = []


class DomainConstraintLayer(_Record):
    domain_name: str = ""
    business_rules: list[BusinessRule] = []


class FieldType(_Record):
    table: str
    column: str
    semantic_category: str
    unit: Optional[str] = None
    value_range: Optional[list[Any]] = None
    example_values: list[Any] = []


class FieldTypeLayer(_Record):
    columns: list[FieldType] = []


class ColumnSemantics(_Record):
    table: str
    column: str
    meaning: str = ""
    allowed_operations: list[str] = []
    nullability: str = ""


class ColumnSemanticsLayer(_Record):
    columns: list[ColumnSemantics] = []


class TableConstraint(_Record):
    statement: str
    columns: list[str] = []


class TableRole(_Record):
    table: str
    role: str
    constraints: list[TableConstraint] = []


class TableConstraintLayer(_Record):
    tables: list[TableRole] = []


class JoinEdge(_Record):
    from_table: str
    from_column: str
    to_table: str
    to_column: str
    cardinality: str = "1:N"
    label: str = ""
    inferred: bool = True

    def connects(self, a: tuple[str, str], b: tuple[str, str]) -> bool:
        ends = {(self.from_table.lower(), self.from_column.lower()),
                (self.to_table.lower(), self.to_column.lower())}
        return ends == {(a[0].lower(), a[1].lower()), (b[0].lower(), b[1].lower())}

    def touches(self, table: str) -> bool:
        t = table.lower()
        return self.from_table.lower() == t or self.to_table.lower() == t


class DerivedDependency(_Record):
    statement: str
    tables: list[str] = []


class RelationLayer(_Record):
    join_edges: list[JoinEdge] = []
    derived_dependencies: list[DerivedDependency] = []


LAYER_MODELS: dict[int, type[_Record]] = {
    1: MetadataLayer,
    2: DomainConstraintLayer,
    3: FieldTypeLayer,
    4: ColumnSemanticsLayer,
    5: TableConstraintLayer,
    6: RelationLayer,
}


class LayerProvenance(_Record):
    stage: int
    prompt_fingerprint: str
    model_id: str
    timestamp: str


class KnowledgeBase(_Record):
    k1_metadata: Optional[MetadataLayer] = None
    k2_domain: Optional[DomainConstraintLayer] = None
    k3_field_types: Optional[FieldTypeLayer] = None
    k4_columns: Optional[ColumnSemanticsLayer] = None
    k5_tables: Optional[TableConstraintLayer] = None
    k6_relations: Optional[RelationLayer] = None
    provenance: dict[int, LayerProvenance] = {}
    complete: bool = False

    def layer(self, t: int):
        return getattr(self, LAYER_NAMES[t])

    def with_layer(self, t: int, record, provenance: LayerProvenance | None = None) -> KnowledgeBase:
        update: dict[str, Any] = {LAYER_NAMES[t]: record}
        if provenance is not None:
            update["provenance"] = {**self.provenance, t: provenance}
        return self.model_copy(update=update)

    def has_all_layers(self) -> bool:
        return all(self.layer(t) is not None for t in LAYER_NAMES)

    # -- keyed lookups (case-insensitive) -------------------------------

    def column_universe(self) -> list[tuple[str, str]]:
        return [(c.table, c.column) for c in self.k1_metadata.columns] if self.k1_metadata else []

    def table_names(self) -> list[str]:
        return [t.table for t in self.k1_metadata.tables] if self.k1_metadata else []

    def columns_of(self, table: str) -> list[str]:
        t = table.lower()
        return [c for tb, c in self.column_universe() if tb.lower() == t]

    def field_type(self, table: str, column: str) -> FieldType | None:
        return _find(self.k3_field_types.columns if self.k3_field_types else [], table, column)

    def column_semantics(self, table: str, column: str) -> ColumnSemantics | None:
        return _find(self.k4_columns.columns if self.k4_columns else [], table, column)

    def column_meta(self, table: str, column: str) -> ColumnMeta | None:
        return _find(self.k1_metadata.columns if self.k1_metadata else [], table, column)

    def table_meta(self, table: str) -> TableMeta | None:
        t = table.lower()
        for m in (self.k1_metadata.tables if self.k1_metadata else []):
            if m.table.lower() == t:
                return m
        return None

    def edges_touching(self, *tables: str) -> list[JoinEdge]:
        edges = self.k6_relations.join_edges if self.k6_relations else []
        return [e for e in edges if any(e.touches(t) for t in tables)]

    def content_dict(self) -> dict:
        """Layers only, without provenance; the basis for equality and fingerprints."""
        return {name: (self.layer(t).model_dump(mode="json") if self.layer(t) else None)
                for t, name in LAYER_NAMES.items()}

    def fingerprint(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _find(items, table: str, column: str):
    t, c = table.lower(), column.lower()
    for item in items:
        if item.table.lower() == t and item.column.lower() == c:
            return item
    return None


# -- stage prompts ---------------------------------------------------------

_STAGE_TASKS = {
    1: ("Schema Extraction",
        "Describe every table and every column of the database. Estimate each table's row count.",
        '{"tables": [{"table": str, "description": str, "row_count_estimate": int}], '
        '"columns": [{"table": str, "column": str, "description": str}]}'),
    2: ("Domain Analysis",
        "Identify the application domain and the business rules a correct query must respect. "
        "Reference columns as table.column.",
        '{"domain_name": str, "business_rules": [{"rule_id": str, "statement": str, '
        '"affected_tables": [str], "affected_columns": ["table.column"]}]}'),
    3: ("Field Type Analysis",
        "Assign exactly one semantic category to every column: identifier, categorical, "
        "quantitative, temporal or free_text. Give a unit when meaningful, a value_range "
        "[low, high] only for quantitative or temporal columns, and at most 5 example values.",
        '{"columns": [{"table": str, "column": str, "semantic_category": str, "unit": str|null, '
        '"value_range": [low, high]|null, "example_values": [...]}]}'),
    4: ("Column Analysis",
        "State what each column means, which operations are valid on it (subset of select, filter, "
        "group, order, sum, avg, min, max, count) and what NULL means for it. SUM/AVG only on "
        "quantitative columns, MIN/MAX only on quantitative or temporal columns.",
        '{"columns": [{"table": str, "column": str, "meaning": str, '
        '"allowed_operations": [str], "nullability": str}]}'),
    5: ("Table Analysis",
        "Give each table its entity role (primary_entity, domain_attribute or metadata_entity) "
        "and list intra-table constraints such as value dependencies between columns.",
        '{"tables": [{"table": str, "role": str, '
        '"constraints": [{"statement": str, "columns": [str]}]}]}'),
    6: ("Relation Analysis",
        "List join paths between tables with cardinality (1:1, 1:N or N:M) and a short semantic "
        "label, plus cross-table dependency rules. Declared foreign keys are authoritative.",
        '{"join_edges": [{"from_table": str, "from_column": str, "to_table": str, '
        '"to_column": str, "cardinality": str, "label": str}], '
        '"derived_dependencies": [{"statement": str, "tables": [str]}]}'),
}


def _sample_payload(sample: InstanceSample, columns_by_table: dict[str, list[str]]) -> dict:
    return {t: {"columns": columns_by_table.get(t, []), "rows": [list(r) for r in rows]}
            for t, rows in sample.rows.items()}


def stage_inputs(t: int, schema: DatabaseSchema, sample: InstanceSample, prior: KnowledgeBase) -> dict:
    """Collect the declared inputs of stage ``t``; raises MissingPriorLayer if any is absent."""
    if t not in STAGE_INPUTS:
        raise ValueError(f"stage index must be 1..6, got {t}")
    payload: dict[str, Any] = {}
    for name in STAGE_INPUTS[t]:
        if name == "schema":
            payload["schema_ddl"] = schema.to_ddl()
        elif name == "sample":
            if t == 1:
                cols = {tb.name: tb.column_names for tb in schema.tables}
            else:
                cols = {}
                for tb, c in prior.column_universe():
                    cols.setdefault(tb, []).append(c)
            payload["sample_rows"] = _sample_payload(sample, cols)
        elif name == "foreign_keys":
            payload["foreign_keys"] = [
                f"{fk.from_table}.{fk.from_column} -> {fk.to_table}.{fk.to_column}"
                for fk in schema.foreign_keys]
        else:
            idx = int(name[1])
            layer = prior.layer(idx)
            if layer is None:
                raise MissingPriorLayer(f"stage {t} requires {LAYER_NAMES[idx]}")
            payload[LAYER_NAMES[idx]] = layer.model_dump(mode="json")
    return payload


def stage_request(t: int, payload: dict) -> ChatRequest:
    title, task, shape = _STAGE_TASKS[t]
    system = (f"[kb_stage_{t}] You are a database domain analyst building a semantic knowledge "
              f"base, stage {t}: {title}.\n{task}\nAnswer with one JSON object of the form:\n{shape}")
    user = "INPUT\n" + json.dumps(payload, ensure_ascii=False, sort_keys=True, default=str)
    return ChatRequest(system, user, temperature=JUDGE_TEMPERATURE,
                       response_schema_tag="structured_record")


# -- per-layer repair and validation ----------------------------------------

def _split_ref(ref: str) -> tuple[str, str] | None:
    if "." not in ref:
        return None
    table, column = ref.split(".", 1)
    return table.strip(), column.strip()


def _resolve_table(schema: DatabaseSchema, name: str, stage: int) -> str | None:
    t = schema.table(name)
    if t is None:
        logger.warning("stage %d: dropping reference to unknown table %r", stage, name)
        return None
    return t.name


def _resolve_column(schema: DatabaseSchema, table: str, column: str, stage: int) -> tuple[str, str] | None:
    ref = schema.resolve_column(table, column)
    if ref is None:
        logger.warning("stage %d: dropping reference to unknown column %s.%s", stage, table, column)
    return ref


def _per_column(items, schema: DatabaseSchema, stage: int, what: str):
    """Resolve and deduplicate per-column records; duplicates are a validation failure."""
    out = {}
    for item in items:
        ref = _resolve_column(schema, item.table, item.column, stage)
        if ref is None:
            continue
        if ref in out:
            raise ValidationFailure(f"stage {stage}: {what} lists column {ref[0]}.{ref[1]} twice")
        out[ref] = item.model_copy(update={"table": ref[0], "column": ref[1]})
    return out


def _check_l1(layer: MetadataLayer, schema: DatabaseSchema, sample: InstanceSample) -> MetadataLayer:
    tables = {}
    for tm in layer.tables:
        name = _resolve_table(schema, tm.table, 1)
        if name is not None and name not in tables:
            tables[name] = tm.model_copy(update={"table": name})
    cols = {}
    for cm in layer.columns:
        ref = _resolve_column(schema, cm.table, cm.column, 1)
        if ref is not None and ref not in cols:
            cols[ref] = cm.model_copy(update={"table": ref[0], "column": ref[1]})
    for t in schema.tables:
        if t.name not in tables:
            logger.warning("stage 1: no description for table %s; filling blank", t.name)
            tables[t.name] = TableMeta(table=t.name, row_count_estimate=len(sample.rows.get(t.name, [])))
    for ref in schema.all_columns():
        if ref not in cols:
            logger.warning("stage 1: no description for column %s.%s; filling blank", *ref)
            cols[ref] = ColumnMeta(table=ref[0], column=ref[1])
    return MetadataLayer(
        tables=[tables[t.name] for t in schema.tables],
        columns=[cols[ref] for ref in schema.all_columns()],
    )


def _check_l2(layer: DomainConstraintLayer, schema: DatabaseSchema) -> DomainConstraintLayer:
    seen = set()
    rules = []
    for rule in layer.business_rules:
        if rule.rule_id in seen:
            raise ValidationFailure(f"stage 2: duplicate rule_id {rule.rule_id!r}")
        seen.add(rule.rule_id)
        tables = [n for n in (_resolve_table(schema, t, 2) for t in rule.affected_tables) if n]
        columns = []
        for ref in rule.affected_columns:
            parts = _split_ref(ref)
            if parts is None:
                logger.warning("stage 2: dropping unqualified column reference %r", ref)
                continue
            resolved = _resolve_column(schema, parts[0], parts[1], 2)
            if resolved is not None:
                columns.append(f"{resolved[0]}.{resolved[1]}")
        rules.append(rule.model_copy(update={"affected_tables": tables, "affected_columns": columns}))
    return DomainConstraintLayer(domain_name=layer.domain_name, business_rules=rules)


def normalize_category(value: str) -> str | None:
    v = _norm_token(value)
    if v in SEMANTIC_CATEGORIES:
        return v
    return _CATEGORY_SYNONYMS.get(v.replace("_", "")) or _CATEGORY_SYNONYMS.get(v)


def _check_l3(layer: FieldTypeLayer, schema: DatabaseSchema) -> FieldTypeLayer:
    cols = _per_column(layer.columns, schema, 3, "field types")
    out = []
    for ref in schema.all_columns():
        if ref not in cols:
            raise ValidationFailure(f"stage 3: no field type for column {ref[0]}.{ref[1]}")
        ft = cols[ref]
        cat = normalize_category(ft.semantic_category)
        if cat is None:
            raise ValidationFailure(
                f"stage 3: column {ref[0]}.{ref[1]} has unknown category {ft.semantic_category!r}")
        value_range = ft.value_range
        if cat not in ("quantitative", "temporal"):
            value_range = None
        elif value_range is not None and len(value_range) != 2:
            logger.warning("stage 3: dropping malformed value_range for %s.%s", *ref)
            value_range = None
        out.append(ft.model_copy(update={
            "semantic_category": cat,
            "value_range": value_range,
            "example_values": list(ft.example_values)[:5],
        }))
    return FieldTypeLayer(columns=out)


def compatible_operations(category: str) -> set[str]:
    """Operations a column of ``category`` may take under the aggregation-compatibility rule."""
    ops = {"select", "filter", "group", "order", "count"}
    if category == "quantitative":
        ops |= {"sum", "avg", "min", "max"}
    elif category == "temporal":
        ops |= {"min", "max"}
    return ops


def normalize_operation(value: str) -> str | None:
    v = _norm_token(value)
    if v in OPERATIONS:
        return v
    return _OPERATION_SYNONYMS.get(v) or _OPERATION_SYNONYMS.get(v.replace("_", ""))


def _check_l4(layer: ColumnSemanticsLayer, schema: DatabaseSchema, k3: FieldTypeLayer) -> ColumnSemanticsLayer:
    cols = _per_column(layer.columns, schema, 4, "column semantics")
    categories = {(f.table, f.column): f.semantic_category for f in k3.columns}
    out = []
    for ref in schema.all_columns():
        allowed_by_type = compatible_operations(categories[ref])
        if ref not in cols:
            logger.warning("stage 4: no semantics for %s.%s; using type defaults", *ref)
            out.append(ColumnSemantics(table=ref[0], column=ref[1],
                                       allowed_operations=[o for o in OPERATIONS if o in allowed_by_type]))
            continue
        cs = cols[ref]
        ops = []
        for raw in cs.allowed_operations:
            op = normalize_operation(raw)
            if op is None:
                logger.warning("stage 4: dropping unknown operation %r on %s.%s", raw, *ref)
            elif op not in allowed_by_type:
                logger.warning("stage 4: dropping %s on %s.%s (%s column)", op, ref[0], ref[1], categories[ref])
            elif op not in ops:
                ops.append(op)
        ops.sort(key=OPERATIONS.index)
        out.append(cs.model_copy(update={"allowed_operations": ops}))
    return ColumnSemanticsLayer(columns=out)


def normalize_role(value: str) -> str | None:
    v = _norm_token(value)
    return v if v in ENTITY_ROLES else None


def _check_l5(layer: TableConstraintLayer, schema: DatabaseSchema) -> TableConstraintLayer:
    roles = {}
    for tr in layer.tables:
        name = _resolve_table(schema, tr.table, 5)
        if name is None:
            continue
        role = normalize_role(tr.role)
        if role is None:
            raise ValidationFailure(f"stage 5: table {name} has role {tr.role!r} outside {ENTITY_ROLES}")
        constraints = []
        for c in tr.constraints:
            cols = [r[1] for r in (_resolve_column(schema, name, col, 5) for col in c.columns) if r]
            constraints.append(c.model_copy(update={"columns": cols}))
        roles[name] = tr.model_copy(update={"table": name, "role": role, "constraints": constraints})
    missing = [t.name for t in schema.tables if t.name not in roles]
    if missing:
        raise ValidationFailure(f"stage 5: no entity role for table(s) {', '.join(missing)}")
    return TableConstraintLayer(tables=[roles[t.name] for t in schema.tables])


def normalize_cardinality(value: str) -> str | None:
    v = value.strip()
    if v in CARDINALITIES:
        return v
    return _CARDINALITY_SYNONYMS.get(_norm_token(v))


def fk_edge(schema: DatabaseSchema, fk) -> JoinEdge:
    child = schema.table(fk.from_table)
    unique = child is not None and list(child.primary_key) == [fk.from_column]
    return JoinEdge(from_table=fk.from_table, from_column=fk.from_column,
                    to_table=fk.to_table, to_column=fk.to_column,
                    cardinality="1:1" if unique else "1:N", label="foreign key", inferred=False)


def _check_l6(layer: RelationLayer, schema: DatabaseSchema) -> RelationLayer:
    fk_edges = [fk_edge(schema, fk) for fk in schema.foreign_keys]
    edges: list[JoinEdge] = []
    for e in layer.join_edges:
        a = _resolve_column(schema, e.from_table, e.from_column, 6)
        b = _resolve_column(schema, e.to_table, e.to_column, 6)
        if a is None or b is None or a == b:
            continue
        card = normalize_cardinality(e.cardinality)
        if card is None:
            raise ValidationFailure(f"stage 6: edge {a[0]}.{a[1]} - {b[0]}.{b[1]} has cardinality {e.cardinality!r}")
        declared = next((f for f in fk_edges if f.connects(a, b)), None)
        if declared is not None:
            edge = declared.model_copy(update={"cardinality": card, "label": e.label or declared.label})
        else:
            edge = JoinEdge(from_table=a[0], from_column=a[1], to_table=b[0], to_column=b[1],
                            cardinality=card, label=e.label, inferred=True)
        if not any(x.connects((edge.from_table, edge.from_column), (edge.to_table, edge.to_column))
                   for x in edges):
            edges.append(edge)
    for f in fk_edges:
        if not any(x.connects((f.from_table, f.from_column), (f.to_table, f.to_column)) for x in edges):
            edges.append(f)
    deps = []
    for d in layer.derived_dependencies:
        tables = [n for n in (_resolve_table(schema, t, 6) for t in d.tables) if n]
        deps.append(d.model_copy(update={"tables": tables}))
    return RelationLayer(join_edges=edges, derived_dependencies=deps)


def validate_layer(t: int, record, schema: DatabaseSchema, sample: InstanceSample, prior: KnowledgeBase):
    """Resolve names against the schema, apply deterministic repairs, enforce layer invariants."""
    if t == 1:
        return _check_l1(record, schema, sample)
    if t == 2:
        return _check_l2(record, schema)
    if t == 3:
        return _check_l3(record, schema)
    if t == 4:
        return _check_l4(record, schema, prior.k3_field_types)
    if t == 5:
        return _check_l5(record, schema)
    return _check_l6(record, schema)


# -- build ---------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_stage(
    t: int,
    schema: DatabaseSchema,
    sample: InstanceSample,
    prior: KnowledgeBase,
    gateway: Gateway,
) -> tuple[Any, LayerProvenance]:
    """Run one extraction stage and return its validated layer plus provenance."""
    request = stage_request(t, stage_inputs(t, schema, sample, prior))
    raw = gateway.complete_structured(request, LAYER_MODELS[t])
    layer = validate_layer(t, raw, schema, sample, prior)
    prov = LayerProvenance(stage=t, prompt_fingerprint=request.fingerprint(),
                           model_id=gateway.model_id, timestamp=_now())
    return layer, prov


class KBStore:
    """One JSON file per layer plus ``manifest.json`` holding stage fingerprints."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    @property
    def manifest_path(self) -> Path:
        return self.directory / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"stages": {}, "complete": False}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def _write_manifest(self, manifest: dict) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        tmp.replace(self.manifest_path)

    def save_layer(self, t: int, layer, prov: LayerProvenance) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"{LAYER_NAMES[t]}.json"
        path.write_text(layer.model_dump_json(indent=1), encoding="utf-8")
        manifest = self.manifest()
        manifest["stages"][str(t)] = {
            "file": path.name,
            **prov.model_dump(mode="json"),
        }
        # later stages depend on this one; invalidate them
        for later in range(t + 1, 7):
            manifest["stages"].pop(str(later), None)
        manifest["complete"] = False
        self._write_manifest(manifest)

    def load_layer(self, t: int, fingerprint: str | None = None):
        entry = self.manifest()["stages"].get(str(t))
        if entry is None or (fingerprint is not None and entry["prompt_fingerprint"] != fingerprint):
            return None
        data = json.loads((self.directory / entry["file"]).read_text(encoding="utf-8"))
        prov = LayerProvenance.model_validate(entry)
        return LAYER_MODELS[t].model_validate(data), prov

    def mark_complete(self, kb: KnowledgeBase) -> None:
        manifest = self.manifest()
        manifest["complete"] = True
        manifest["kb_fingerprint"] = kb.fingerprint()
        self._write_manifest(manifest)

    def load(self) -> KnowledgeBase:
        kb = KnowledgeBase()
        for t in LAYER_NAMES:
            got = self.load_layer(t)
            if got is not None:
                kb = kb.with_layer(t, got[0], got[1])
        if self.manifest().get("complete") and kb.has_all_layers():
            kb = kb.model_copy(update={"complete": True})
        return kb


def build(
    schema: DatabaseSchema,
    sample: InstanceSample,
    gateway: Gateway,
    store: KBStore | None = None,
) -> KnowledgeBase:
    """Run stages 1..6 in order.

    With a ``store``, each finished layer is persisted immediately and a stage
    whose prompt fingerprint matches the stored one is loaded instead of
    re-requested, so an interrupted build resumes where it stopped.
    """
    if not schema.tables:
        raise ValueError("cannot build a knowledge base for an empty schema")
    kb = KnowledgeBase()
    for t in LAYER_NAMES:
        request = stage_request(t, stage_inputs(t, schema, sample, kb))
        cached = store.load_layer(t, request.fingerprint()) if store is not None else None
        if cached is not None:
            logger.info("stage %d: reusing persisted layer", t)
            kb = kb.with_layer(t, *cached)
            continue
        layer, prov = run_stage(t, schema, sample, kb, gateway)
        if store is not None:
            store.save_layer(t, layer, prov)
        kb = kb.with_layer(t, layer, prov)
    kb = kb.model_copy(update={"complete": True})
    if store is not None:
        store.mark_complete(kb)
    return kb


# -- evidence retrieval ---------------------------------------------------------

ERROR_TYPES = (
    "not_executable", "invalid_column", "invalid_table",
    "aggregation_type_mismatch", "join_inconsistency", "trace_sql_divergence",
)
_ERROR_ALIASES = {"invalid_join": "join_inconsistency", "type_mismatch": "aggregation_type_mismatch"}
MAX_CANDIDATES = 5
MAX_EDIT_DISTANCE = 2


@dataclass(frozen=True)
class EvidenceQuery:
    error_type: str
    table: str | None = None
    column: str | None = None
    tables: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvidenceEntry:
    layer: str
    key: str
    statement: str

    def to_dict(self) -> dict:
        return {"layer": self.layer, "key": self.key, "statement": self.statement}


@dataclass
class Evidence:
    entries: list[EvidenceEntry] = field(default_factory=list)

    def __bool__(self):
        return bool(self.entries)

    def extend(self, other: Evidence) -> None:
        for e in other.entries:
            if e not in self.entries:
                self.entries.append(e)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries]}


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def near_names(name: str, pool: list[str], limit: int = MAX_CANDIDATES) -> list[str]:
    """Names within edit distance 2 (closest first), then prefix matches; case-insensitive."""
    low = name.lower()
    scored = sorted(((levenshtein(low, p.lower()), p) for p in pool), key=lambda x: (x[0], x[1].lower()))
    out = [p for d, p in scored if d <= MAX_EDIT_DISTANCE]
    for p in sorted(pool, key=str.lower):
        pl = p.lower()
        if p not in out and len(low) >= 3 and len(pl) >= 3 and (pl.startswith(low) or low.startswith(pl)):
            out.append(p)
    return out[:limit]


def _k1_column_entry(kb: KnowledgeBase, table: str, column: str) -> EvidenceEntry:
    meta = kb.column_meta(table, column)
    return EvidenceEntry("K1", f"{table}.{column}", f"column {table}.{column}: {meta.description if meta else ''}".rstrip(": "))


def _k4_entry(kb: KnowledgeBase, table: str, column: str) -> EvidenceEntry | None:
    sem = kb.column_semantics(table, column)
    if sem is None:
        return None
    return EvidenceEntry("K4", f"{table}.{column}",
                         f"allowed_operations={','.join(sem.allowed_operations)}; meaning={sem.meaning}")


def _k1_table_entry(kb: KnowledgeBase, table: str) -> EvidenceEntry:
    meta = kb.table_meta(table)
    cols = ", ".join(kb.columns_of(table))
    desc = meta.description if meta else ""
    return EvidenceEntry("K1", table, f"table {table} ({cols}): {desc}".rstrip(": "))


def _canonical_tables(kb: KnowledgeBase, names) -> list[str]:
    known = {t.lower(): t for t in kb.table_names()}
    return [known[n.lower()] for n in names if n and n.lower() in known]


def retrieve(kb: KnowledgeBase, query: EvidenceQuery) -> Evidence:
    """Keyed lookup of corrective evidence for one diagnosed error.

    Raises EmptyEvidence when the KB has nothing relevant, which tells the
    corrector to reformulate rather than patch.
    """
    etype = _ERROR_ALIASES.get(query.error_type, query.error_type)
    if etype not in ERROR_TYPES:
        raise UnknownErrorType(query.error_type)
    if not kb.has_all_layers():
        raise ValueError("retrieve requires a complete knowledge base")
    entries: list[EvidenceEntry] = []
    named_tables = _canonical_tables(kb, [query.table, *query.tables])

    if etype == "invalid_column" and query.column:
        for table in named_tables or kb.table_names():
            for cand in near_names(query.column, kb.columns_of(table)):
                entries.append(_k1_column_entry(kb, table, cand))
                k4 = _k4_entry(kb, table, cand)
                if k4:
                    entries.append(k4)
    elif etype == "invalid_table":
        bad = query.table or (query.tables[0] if query.tables else "")
        for cand in near_names(bad, kb.table_names()):
            entries.append(_k1_table_entry(kb, cand))
    elif etype == "join_inconsistency":
        for e in kb.edges_touching(*named_tables):
            entries.append(EvidenceEntry(
                "K6", f"{e.from_table}.{e.from_column}->{e.to_table}.{e.to_column}",
                f"{e.cardinality} {e.label}; {'inferred' if e.inferred else 'declared foreign key'}"))
    elif etype == "aggregation_type_mismatch" and query.column:
        for table in named_tables:
            ft = kb.field_type(table, query.column)
            if ft is None:
                continue
            stmt = f"semantic_category={ft.semantic_category}"
            if ft.unit:
                stmt += f"; unit={ft.unit}"
            entries.append(EvidenceEntry("K3", f"{ft.table}.{ft.column}", stmt))
            k4 = _k4_entry(kb, ft.table, ft.column)
            if k4:
                entries.append(k4)
    elif etype in ("trace_sql_divergence", "not_executable"):
        for table in named_tables:
            entries.append(_k1_table_entry(kb, table))

    if not entries:
        raise EmptyEvidence(f"no evidence for {etype} ({query})")
    return Evidence(entries)
