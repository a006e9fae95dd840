"""Read-only access to SQLite databases: schema catalog, row sampling, execution."""

from __future__ import annotations

import hashlib
import logging
import math
import sqlite3
import time
from contextlib import closing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import (
    DatabaseNotFound,
    EmptySchema,
    NotADatabase,
    QueryFailure,
    SchemaInvariantError,
)

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_ROWS = 20
BLOB_DIGEST_PREFIX = "blob:sha256:"


def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


@dataclass(frozen=True)
class ColumnDef:
    name: str
    declared_type: str = ""
    nullable: bool = True

    def __post_init__(self):
        if not self.name:
            raise SchemaInvariantError("column name must be non-empty")


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]
    primary_key: tuple[str, ...] = ()

    def __post_init__(self):
        seen = set()
        for col in self.columns:
            key = col.name.lower()
            if key in seen:
                raise SchemaInvariantError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(key)
        for pk in self.primary_key:
            if pk.lower() not in seen:
                raise SchemaInvariantError(f"primary key column {pk!r} not in table {self.name!r}")

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> ColumnDef | None:
        low = name.lower()
        for col in self.columns:
            if col.name.lower() == low:
                return col
        return None


@dataclass(frozen=True)
class ForeignKeyDef:
    from_table: str
    from_column: str
    to_table: str
    to_column: str

    def __post_init__(self):
        if (self.from_table.lower() == self.to_table.lower()
                and self.from_column.lower() == self.to_column.lower()):
            raise SchemaInvariantError(
                f"foreign key {self.from_table}.{self.from_column} references itself")

    def touches(self, table: str) -> bool:
        t = table.lower()
        return self.from_table.lower() == t or self.to_table.lower() == t


@dataclass(frozen=True)
class DatabaseSchema:
    db_name: str
    tables: tuple[TableDef, ...]
    foreign_keys: tuple[ForeignKeyDef, ...] = ()

    def __post_init__(self):
        names = set()
        for t in self.tables:
            if t.name.lower() in names:
                raise SchemaInvariantError(f"duplicate table name {t.name!r}")
            names.add(t.name.lower())
        for fk in self.foreign_keys:
            for table, column in ((fk.from_table, fk.from_column), (fk.to_table, fk.to_column)):
                if self.resolve_column(table, column) is None:
                    raise SchemaInvariantError(
                        f"foreign key endpoint {table}.{column} does not resolve")

    # -- lookups (case-insensitive, returning canonical spellings) --------

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def table(self, name: str) -> TableDef | None:
        low = name.lower()
        for t in self.tables:
            if t.name.lower() == low:
                return t
        return None

    def resolve_column(self, table: str, column: str) -> tuple[str, str] | None:
        t = self.table(table)
        if t is None:
            return None
        c = t.column(column)
        if c is None:
            return None
        return t.name, c.name

    def all_columns(self) -> list[tuple[str, str]]:
        return [(t.name, c.name) for t in self.tables for c in t.columns]

    def tables_with_column(self, column: str) -> list[str]:
        return [t.name for t in self.tables if t.column(column) is not None]

    # -- rendering --------------------------------------------------------

    def to_ddl(self) -> str:
        """Render as compact CREATE TABLE text, FKs inline."""
        chunks = []
        for t in self.tables:
            lines = []
            for c in t.columns:
                line = f"  {c.name} {c.declared_type}".rstrip()
                if not c.nullable:
                    line += " NOT NULL"
                lines.append(line)
            if t.primary_key:
                lines.append(f"  PRIMARY KEY ({', '.join(t.primary_key)})")
            for fk in self.foreign_keys:
                if fk.from_table == t.name:
                    lines.append(
                        f"  FOREIGN KEY ({fk.from_column}) REFERENCES {fk.to_table}({fk.to_column})")
            chunks.append(f"CREATE TABLE {t.name} (\n" + ",\n".join(lines) + "\n);")
        return "\n".join(chunks)

    def to_dict(self) -> dict:
        return {
            "db_name": self.db_name,
            "tables": [
                {
                    "name": t.name,
                    "columns": [
                        {"name": c.name, "declared_type": c.declared_type, "nullable": c.nullable}
                        for c in t.columns
                    ],
                    "primary_key": list(t.primary_key),
                }
                for t in self.tables
            ],
            "foreign_keys": [
                {"from_table": f.from_table, "from_column": f.from_column,
                 "to_table": f.to_table, "to_column": f.to_column}
                for f in self.foreign_keys
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> DatabaseSchema:
        tables = tuple(
            TableDef(
                name=t["name"],
                columns=tuple(ColumnDef(**c) for c in t["columns"]),
                primary_key=tuple(t.get("primary_key", ())),
            )
            for t in data["tables"]
        )
        fks = tuple(ForeignKeyDef(**f) for f in data.get("foreign_keys", ()))
        return cls(db_name=data["db_name"], tables=tables, foreign_keys=fks)


@dataclass
class InstanceSample:
    """Rows sampled per table; each row is a tuple aligned with the table's columns."""

    rows: dict[str, list[tuple]] = field(default_factory=dict)
    rows_per_table: int = DEFAULT_SAMPLE_ROWS
    seed: int = 0

    def column_values(self, table: str, column_index: int) -> list[Any]:
        return [r[column_index] for r in self.rows.get(table, [])]

    def to_dict(self) -> dict:
        return {
            "rows_per_table": self.rows_per_table,
            "seed": self.seed,
            "rows": {t: [list(r) for r in rows] for t, rows in self.rows.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> InstanceSample:
        return cls(
            rows={t: [tuple(r) for r in rows] for t, rows in data["rows"].items()},
            rows_per_table=data["rows_per_table"],
            seed=data["seed"],
        )


def connect_readonly(db_path: str | Path) -> sqlite3.Connection:
    path = Path(db_path)
    if not path.is_file():
        raise DatabaseNotFound(f"database file not found: {path}")
    uri = f"{path.resolve().as_uri()}?mode=ro"
    conn = sqlite3.connect(uri, uri=True, check_same_thread=False)
    conn.execute("PRAGMA query_only = 1")
    return conn


def introspect(db_path: str | Path) -> DatabaseSchema:
    """Read user tables, columns, primary and foreign keys from a SQLite file.

    Views and ``sqlite_*`` internal tables are skipped. Declared FKs that point
    at missing tables or columns are dropped with a warning, since SQLite
    accepts them at DDL time.
    """
    path = Path(db_path)
    with closing(connect_readonly(path)) as conn:
        try:
            names = [
                r[0] for r in conn.execute(
                    "SELECT name FROM sqlite_master WHERE type = 'table' "
                    "AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid")
            ]
        except sqlite3.DatabaseError as exc:
            raise NotADatabase(f"{path}: {exc}") from exc
        if not names:
            raise EmptySchema(f"{path} has no user tables")

        tables = []
        raw_fks = []
        for name in names:
            info = conn.execute(f"PRAGMA table_info({quote_ident(name)})").fetchall()
            columns = tuple(
                ColumnDef(name=r[1], declared_type=r[2] or "", nullable=not r[3]) for r in info
            )
            pk = tuple(r[1] for r in sorted((r for r in info if r[5]), key=lambda r: r[5]))
            tables.append(TableDef(name=name, columns=columns, primary_key=pk))
            for r in conn.execute(f"PRAGMA foreign_key_list({quote_ident(name)})"):
                # id, seq, table, from, to, on_update, on_delete, match
                raw_fks.append((name, r[3], r[2], r[4]))

    partial = DatabaseSchema(db_name=path.stem, tables=tuple(tables))
    fks = []
    for from_table, from_col, to_table, to_col in raw_fks:
        parent = partial.table(to_table)
        if parent is None:
            logger.warning("dropping FK %s.%s -> %s: unknown table", from_table, from_col, to_table)
            continue
        if to_col is None:
            # REFERENCES parent without a column list targets the parent PK
            if len(parent.primary_key) != 1:
                logger.warning("dropping FK %s.%s -> %s: ambiguous target", from_table, from_col, to_table)
                continue
            to_col = parent.primary_key[0]
        src = partial.resolve_column(from_table, from_col)
        dst = partial.resolve_column(parent.name, to_col)
        if src is None or dst is None or src == dst:
            logger.warning("dropping unresolvable FK %s.%s -> %s.%s", from_table, from_col, to_table, to_col)
            continue
        fk = ForeignKeyDef(src[0], src[1], dst[0], dst[1])
        if fk not in fks:
            fks.append(fk)
    return DatabaseSchema(db_name=path.stem, tables=tuple(tables), foreign_keys=tuple(fks))


def blob_digest(value: bytes) -> str:
    return BLOB_DIGEST_PREFIX + hashlib.sha256(value).hexdigest()[:16]


def stride_positions(n_rows: int, cap: int, seed: int) -> list[int]:
    """Row positions (0-based, rowid order) picked for a table of ``n_rows``."""
    if n_rows <= 0:
        return []
    stride = max(1, math.ceil(n_rows / cap))
    offset = seed % stride
    return list(range(offset, n_rows, stride))[:cap]


def sample_instances(
    schema: DatabaseSchema,
    db_path: str | Path,
    rows_per_table: int = DEFAULT_SAMPLE_ROWS,
    seed: int = 0,
) -> InstanceSample:
    """Deterministically sample up to ``rows_per_table`` rows from every table.

    Rows are ordered by rowid (primary key for WITHOUT ROWID tables) and every
    ``ceil(N / cap)``-th row is taken, starting at ``seed % stride``.
    """
    if rows_per_table < 1:
        raise ValueError("rows_per_table must be positive")
    out: dict[str, list[tuple]] = {}
    with closing(connect_readonly(db_path)) as conn:
        for table in schema.tables:
            cols = ", ".join(quote_ident(c.name) for c in table.columns)
            qt = quote_ident(table.name)
            try:
                n_rows = conn.execute(f"SELECT COUNT(*) FROM {qt}").fetchone()[0]
                wanted = set(stride_positions(n_rows, rows_per_table, seed))
                try:
                    cursor = conn.execute(f"SELECT {cols} FROM {qt} ORDER BY rowid")
                except sqlite3.OperationalError:
                    order = ", ".join(quote_ident(c) for c in table.primary_key) or "1"
                    cursor = conn.execute(f"SELECT {cols} FROM {qt} ORDER BY {order}")
                rows = []
                for pos, row in enumerate(cursor):
                    if pos in wanted:
                        rows.append(tuple(blob_digest(v) if isinstance(v, bytes) else v for v in row))
                        if len(rows) == len(wanted):
                            break
            except sqlite3.Error as exc:
                raise QueryFailure(f"sampling {table.name!r} failed: {exc}") from exc
            out[table.name] = rows
    return InstanceSample(rows=out, rows_per_table=rows_per_table, seed=seed)


@dataclass
class ExecutionResult:
    success: bool
    row_count: int | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"success": self.success, "row_count": self.row_count, "error": self.error}


def execute_readonly(db_path: str | Path, sql: str, timeout: float = 5.0) -> ExecutionResult:
    """Run untrusted SQL on a read-only connection, aborting after ``timeout`` seconds.

    A missing database file raises; engine errors and timeouts are returned as
    unsuccessful results.
    """
    with closing(connect_readonly(db_path)) as conn:
        deadline = time.monotonic() + timeout
        conn.set_progress_handler(lambda: int(time.monotonic() > deadline), 10_000)
        try:
            cursor = conn.execute(sql)
            count = 0
            for _ in cursor:
                count += 1
        except sqlite3.Warning as exc:
            return ExecutionResult(False, error=f"rejected: {exc}")
        except sqlite3.OperationalError as exc:
            if str(exc) == "interrupted":
                return ExecutionResult(False, error=f"timeout after {timeout}s")
            return ExecutionResult(False, error=str(exc))
        except sqlite3.Error as exc:
            return ExecutionResult(False, error=str(exc))
    return ExecutionResult(True, row_count=count)
