"""Deterministic SQL facts extraction and complexity classification (SQLite dialect)."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError, TokenError
from sqlglot.optimizer.scope import Scope, traverse_scope

from .errors import SqlParseError, UnsupportedDialect
from .introspect import DatabaseSchema

FEATURES = (
    "where", "order_by", "limit", "distinct", "group_by", "having", "join",
    "subquery", "correlated_subquery", "case_when", "union", "window_function",
    "cte", "recursive_cte",
)

AGGREGATE_TYPES = {
    exp.Count: "COUNT",
    exp.Sum: "SUM",
    exp.Avg: "AVG",
    exp.Min: "MIN",
    exp.Max: "MAX",
    exp.GroupConcat: "GROUP_CONCAT",
}
# sqlglot leaves these as Anonymous in the sqlite dialect
ANONYMOUS_AGGREGATES = {"TOTAL"}

L4_FEATURES = frozenset({"window_function", "cte", "recursive_cte"})
L3_FEATURES = frozenset({"subquery", "correlated_subquery", "case_when", "union"})
L2_FEATURES = frozenset({"group_by", "having"})
L1_FEATURES = frozenset({"where", "order_by", "limit", "distinct"})


class Level(IntEnum):
    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4

    def __str__(self):
        return self.name

    @classmethod
    def parse(cls, value) -> Level:
        if isinstance(value, Level):
            return value
        if isinstance(value, str):
            v = value.strip().upper()
            if v.startswith("L"):
                v = v[1:]
            return cls(int(v))
        return cls(int(value))


ColumnRef = tuple[str, str]


@dataclass(frozen=True)
class Aggregation:
    function: str
    table: str | None = None
    column: str | None = None
    expression: str = ""

    @property
    def ref(self) -> ColumnRef | None:
        if self.table is None or self.column is None:
            return None
        return (self.table, self.column)


@dataclass(frozen=True)
class JoinCondition:
    left: ColumnRef
    right: ColumnRef
    operator: str = "="


@dataclass
class SqlFacts:
    tables: set[str] = field(default_factory=set)
    columns: set[ColumnRef] = field(default_factory=set)
    join_conditions: list[JoinCondition] = field(default_factory=list)
    aggregations: list[Aggregation] = field(default_factory=list)
    features: set[str] = field(default_factory=set)
    # (qualifier as written or None, column) pairs no source could supply
    unresolved: set[tuple[str | None, str]] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "tables": sorted(self.tables),
            "columns": sorted(list(c) for c in self.columns),
            "join_conditions": [[list(j.left), list(j.right), j.operator] for j in self.join_conditions],
            "aggregations": [[a.function, a.table, a.column] for a in self.aggregations],
            "features": sorted(self.features),
            "unresolved": sorted([q or "", c] for q, c in self.unresolved),
        }


@dataclass(frozen=True)
class ComplexityLevel:
    level: Level
    matched_features: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {"level": int(self.level), "matched_features": sorted(self.matched_features)}


def parse_select(sql: str) -> exp.Expression:
    """Parse exactly one SELECT-shaped statement (incl. WITH / set operations)."""
    if not sql or not sql.strip():
        raise SqlParseError("empty SQL")
    try:
        statements = [s for s in sqlglot.parse(sql, read="sqlite") if s is not None]
    except ParseError as exc:
        first = exc.errors[0] if exc.errors else {}
        raise SqlParseError(first.get("description", str(exc)), first.get("line"), first.get("col")) from exc
    except TokenError as exc:
        raise SqlParseError(str(exc)) from exc
    if not statements:
        raise SqlParseError("no statement found")
    if len(statements) > 1:
        raise UnsupportedDialect(f"expected one statement, found {len(statements)}")
    tree = statements[0]
    if not isinstance(tree, (exp.Select, exp.SetOperation)):
        raise UnsupportedDialect(f"only SELECT statements are supported, got {tree.key.upper()}")
    return tree


def is_select_statement(sql: str) -> bool:
    try:
        parse_select(sql)
    except UnsupportedDialect:
        return False
    except SqlParseError:
        head = sql.lstrip().split(None, 1)
        return bool(head) and head[0].upper() in ("SELECT", "WITH")
    return True


def _canonical_table(name: str, schema: DatabaseSchema | None) -> str:
    if schema is not None:
        t = schema.table(name)
        if t is not None:
            return t.name
    return name


def _canonical_column(table: str, column: str, schema: DatabaseSchema | None) -> str:
    if schema is not None:
        ref = schema.resolve_column(table, column)
        if ref is not None:
            return ref[1]
    return column


class _Resolver:
    """Resolves column nodes to base-table refs within a scope tree."""

    def __init__(self, schema: DatabaseSchema | None):
        self.schema = schema

    def _lookup_source(self, scope: Scope | None, qualifier: str):
        low = qualifier.lower()
        while scope is not None:
            for name, src in scope.sources.items():
                if name.lower() == low:
                    return src, scope
            scope = scope.parent
        return None, None

    def resolve(self, col: exp.Column, scope: Scope) -> tuple[str, ColumnRef | None, Scope | None]:
        """Return (status, ref, owning scope); status is 'base', 'derived' or 'unresolved'."""
        name = col.name
        if col.table:
            src, owner = self._lookup_source(scope, col.table)
            if src is None:
                return "unresolved", None, None
            if isinstance(src, exp.Table):
                table = _canonical_table(src.name, self.schema)
                return "base", (table, _canonical_column(table, name, self.schema)), owner
            return "derived", None, owner

        inner_tables = [s for s in scope.sources.values() if isinstance(s, exp.Table)]
        inner_derived = len(inner_tables) < len(scope.sources)
        if self.schema is not None:
            # innermost scope first, then outward (correlated references)
            current: Scope | None = scope
            while current is not None:
                tables = [s for s in current.sources.values() if isinstance(s, exp.Table)]
                owners = [t for t in tables if self.schema.resolve_column(t.name, name)]
                if len(owners) == 1:
                    t = _canonical_table(owners[0].name, self.schema)
                    return "base", (t, _canonical_column(t, name, self.schema)), current
                if len(owners) > 1:
                    return "unresolved", None, None  # ambiguous; the engine rejects it too
                if len(tables) < len(current.sources):
                    return "derived", None, current
                current = current.parent
        if len(inner_tables) == 1 and not inner_derived:
            t = _canonical_table(inner_tables[0].name, self.schema)
            return "base", (t, name), scope
        if inner_derived:
            return "derived", None, scope
        return "unresolved", None, None


def _projection_aliases(scope: Scope) -> set[str]:
    node = scope.expression
    if isinstance(node, exp.Select):
        return {e.alias.lower() for e in node.expressions if isinstance(e, exp.Alias)}
    return set()


def _in_window_spec(node: exp.Expression) -> bool:
    parent = node.parent
    while parent is not None:
        if isinstance(parent, exp.Window):
            return True
        if isinstance(parent, (exp.Select, exp.SetOperation)):
            return False
        parent = parent.parent
    return False


def _aggregate_name(node: exp.Expression) -> str | None:
    for cls, name in AGGREGATE_TYPES.items():
        if isinstance(node, cls):
            if name in ("MIN", "MAX") and node.expressions:
                return None  # scalar min(a, b)
            return name
    if isinstance(node, exp.Anonymous) and str(node.this).upper() in ANONYMOUS_AGGREGATES:
        return str(node.this).upper()
    return None


def extract_facts(sql: str, schema: DatabaseSchema | None = None) -> SqlFacts:
    """Extract referenced tables, columns, joins, aggregations and feature flags.

    Column refs are resolved through aliases and scopes; with a schema,
    unqualified columns are attributed to the one in-scope table that has them.
    References no source can supply end up in ``facts.unresolved``.
    """
    tree = parse_select(sql)
    facts = SqlFacts()
    resolver = _Resolver(schema)

    cte_names = {cte.alias_or_name.lower() for cte in tree.find_all(exp.CTE)}
    for table in tree.find_all(exp.Table):
        if table.name and table.name.lower() not in cte_names:
            facts.tables.add(_canonical_table(table.name, schema))

    scopes = traverse_scope(tree)
    col_ref: dict[int, ColumnRef] = {}
    seen_cols: set[int] = set()
    # traverse_scope yields inner scopes first, so each column is resolved in its innermost scope
    for scope in scopes:
        aliases = _projection_aliases(scope)
        is_sub = (scope.is_subquery or scope.is_derived_table) and not scope.is_cte
        if is_sub:
            facts.features.add("subquery")
        for col in scope.columns:
            if id(col) in seen_cols or not col.name or col.name == "*":
                continue
            seen_cols.add(id(col))
            status, ref, owner = resolver.resolve(col, scope)
            if owner is not None and owner is not scope and scope.is_subquery:
                facts.features.add("correlated_subquery")
            if status == "base":
                facts.columns.add(ref)
                col_ref[id(col)] = ref
            elif status == "unresolved":
                if not col.table and col.name.lower() in aliases:
                    continue
                facts.unresolved.add((col.table or None, col.name))
        # USING (a, b) joins reference the column on both sides
        node = scope.expression
        if isinstance(node, exp.Select):
            for join in node.args.get("joins") or []:
                using = join.args.get("using") or []
                if not using:
                    continue
                right = join.this
                left_sources = [s for n, s in scope.sources.items()
                                if isinstance(s, exp.Table) and s is not right]
                if not isinstance(right, exp.Table) or not left_sources:
                    continue
                rt = _canonical_table(right.name, schema)
                for ident in using:
                    cname = ident.name
                    for ls in left_sources:
                        lt = _canonical_table(ls.name, schema)
                        if schema is None or schema.resolve_column(lt, cname):
                            lref = (lt, _canonical_column(lt, cname, schema))
                            rref = (rt, _canonical_column(rt, cname, schema))
                            facts.columns.update((lref, rref))
                            facts.join_conditions.append(JoinCondition(lref, rref, "="))
                            break

    def ref_of(node: exp.Expression) -> ColumnRef | None:
        return col_ref.get(id(node)) if isinstance(node, exp.Column) else None

    # column-to-column comparisons across tables: ON clauses and implicit WHERE joins
    for pred in tree.find_all(exp.EQ, exp.NEQ, exp.GT, exp.GTE, exp.LT, exp.LTE):
        left, right = ref_of(pred.this), ref_of(pred.expression)
        if left is None or right is None:
            continue
        in_join = pred.find_ancestor(exp.Join) is not None
        in_where = pred.find_ancestor(exp.Where) is not None
        if in_join or (in_where and left[0] != right[0]):
            op = {exp.EQ: "=", exp.NEQ: "<>", exp.GT: ">", exp.GTE: ">=",
                  exp.LT: "<", exp.LTE: "<="}[type(pred)]
            facts.join_conditions.append(JoinCondition(left, right, op))

    for node in tree.walk():
        name = _aggregate_name(node)
        if name is None:
            continue
        arg = node.this
        if isinstance(arg, exp.Distinct) and len(arg.expressions) == 1:
            arg = arg.expressions[0]
        if isinstance(node, exp.Anonymous):
            arg = node.expressions[0] if node.expressions else None
        ref = ref_of(arg) if arg is not None else None
        expr_text = arg.sql(dialect="sqlite") if arg is not None else ""
        facts.aggregations.append(
            Aggregation(name, ref[0] if ref else None, ref[1] if ref else None, expr_text))

    if tree.find(exp.Where):
        facts.features.add("where")
    if any(not _in_window_spec(o) for o in tree.find_all(exp.Order)):
        facts.features.add("order_by")
    if tree.find(exp.Limit):
        facts.features.add("limit")
    if tree.find(exp.Distinct) or any(s.args.get("distinct") for s in tree.find_all(exp.Select)):
        facts.features.add("distinct")
    if tree.find(exp.Group):
        facts.features.add("group_by")
    if tree.find(exp.Having):
        facts.features.add("having")
    if tree.find(exp.Join) or facts.join_conditions:
        facts.features.add("join")
    if tree.find(exp.Case):
        facts.features.add("case_when")
    if isinstance(tree, exp.SetOperation) or tree.find(exp.SetOperation):
        facts.features.add("union")
    if tree.find(exp.Window):
        facts.features.add("window_function")
    with_node = tree.find(exp.With)
    if with_node is not None:
        facts.features.add("cte")
        if with_node.args.get("recursive"):
            facts.features.add("recursive_cte")
    return facts


def classify_complexity(facts: SqlFacts) -> ComplexityLevel:
    """Top-down rule: level 4 features first, then 3, then 2, else 1.

    L4: window functions, CTEs or recursive CTEs.
    L3: subqueries, CASE WHEN, set operations, or four or more tables.
    L2: joins over at most three tables combined with GROUP BY, HAVING or an aggregate.
    A join without aggregation falls through to L1.
    """
    feats = set(facts.features)
    hit = feats & L4_FEATURES
    if hit:
        return ComplexityLevel(Level.L4, frozenset(hit))
    hit = feats & L3_FEATURES
    if hit or len(facts.tables) >= 4:
        if len(facts.tables) >= 4:
            hit = hit | ({"join"} & feats or {"join"})
        return ComplexityLevel(Level.L3, frozenset(hit))
    if "join" in feats and len(facts.tables) <= 3:
        grouped = feats & L2_FEATURES
        if grouped or facts.aggregations:
            return ComplexityLevel(Level.L2, frozenset({"join"} | grouped))
    return ComplexityLevel(Level.L1, frozenset(feats & L1_FEATURES))


def classify_sql(sql: str, schema: DatabaseSchema | None = None) -> ComplexityLevel:
    return classify_complexity(extract_facts(sql, schema))
