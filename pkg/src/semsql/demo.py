"""Offline stand-ins for demos and tests.

``make_demo_db`` writes a small two-table school database. ``DemoResponder`` is a
rule-based replacement for the LLM: it reads the JSON payload of each prompt and
answers every task the package issues (knowledge-base stages, question and SQL
generation, correction, consistency judging). Wrap it in
:class:`~semsql.llm.RecordingProvider` to author fingerprint scripts.
"""

from __future__ import annotations

import json
import re
import sqlite3
from contextlib import closing
from pathlib import Path
from typing import Any

from .llm import ChatRequest

SCHOOLS = [
    ("01100170109835", "Alameda"),
    ("01316170131763", "Alameda"),
    ("19647331932037", "Los Angeles"),
    ("19647331995000", "Los Angeles"),
    ("37683383730959", "San Diego"),
    ("43694274330668", "Santa Clara"),
]
SATSCORES = [
    ("01100170109835", "FAME Public Charter", 418),
    ("01316170131763", "Envision Academy", 435),
    ("19647331932037", "Lincoln High", 512),
    ("19647331995000", "Garfield High", 389),
    ("37683383730959", "Mission Bay High", 547),
    ("43694274330668", "Lynbrook High", 684),
]


def make_demo_db(path: str | Path) -> Path:
    """Create (or overwrite) the fixture database at ``path``."""
    path = Path(path)
    if path.exists():
        path.unlink()
    with closing(sqlite3.connect(path)) as conn:
        conn.executescript(
            """
            CREATE TABLE schools (
                CDSCode TEXT NOT NULL PRIMARY KEY,
                County TEXT NOT NULL
            );
            CREATE TABLE satscores (
                cds TEXT NOT NULL REFERENCES schools(CDSCode),
                sname TEXT,
                AvgScrMath INTEGER
            );
            """
        )
        conn.executemany("INSERT INTO schools VALUES (?, ?)", SCHOOLS)
        conn.executemany("INSERT INTO satscores VALUES (?, ?, ?)", SATSCORES)
        conn.commit()
    return path


# The worked example every L1 ranking request reproduces.
WORKED_EXAMPLE: dict[str, Any] = {
    "question": "Which school has the highest average SAT math score?",
    "think": {
        "focus": "Identify single school with MAX(AvgScrMath)",
        "metadata": {
            "main_scenario": "ranking_query",
            "sub_scenario": "max_min_query",
            "complexity_level": 1,
            "use_case": "ranking_analysis",
        },
        "table_selection": {
            "tables_used": ["satscores"],
            "reasoning": "Contains SAT columns for extreme value. Single-table compliant with Level 1",
        },
        "column_selection": {
            "columns_used": [
                {"name": "sname", "type": "TEXT", "operation": "SELECT",
                 "purpose": "Identify school with extreme score"},
                {"name": "AvgScrMath", "type": "INTEGER", "operation": "ORDER BY DESC",
                 "purpose": "Find maximum via sorting"},
            ]
        },
        "sql_strategy": {
            "operations": ["SELECT", "ORDER BY DESC", "LIMIT"],
            "approach": "ORDER BY + LIMIT for extreme value, no aggregation",
            "no_need": ["JOIN", "GROUP BY", "MAX()"],
        },
        "expected_output": "Single row: school name with highest AvgScrMath",
    },
    "answer": "SELECT sname FROM satscores ORDER BY AvgScrMath DESC LIMIT 1;",
}


def _trace(focus, scenario, level, tables, columns, operations, approach, expected):
    return {
        "focus": focus,
        "metadata": {"main_scenario": scenario, "sub_scenario": scenario,
                     "complexity_level": level, "use_case": scenario},
        "table_selection": {"tables_used": tables, "reasoning": f"needs {', '.join(tables)}"},
        "column_selection": {"columns_used": [
            {"name": n, "type": t, "operation": o, "purpose": p} for n, t, o, p in columns]},
        "sql_strategy": {"operations": operations, "approach": approach, "no_need": []},
        "expected_output": expected,
    }


# (question, think, sql) per (level, task_type); "*" matches any task type
LIBRARY: dict[tuple[int, str], tuple[str, dict, str]] = {
    (1, "ranking"): (WORKED_EXAMPLE["question"], WORKED_EXAMPLE["think"], WORKED_EXAMPLE["answer"]),
    (1, "*"): (
        "How many schools are there in each county?",
        _trace("Count schools per county", "distribution_query", 1, ["schools"],
               [("County", "TEXT", "GROUP BY", "bucket schools"),
                ("CDSCode", "TEXT", "COUNT", "count schools")],
               ["SELECT", "GROUP BY", "COUNT"], "single-table grouping", "One row per county"),
        "SELECT County, COUNT(CDSCode) FROM schools GROUP BY County;",
    ),
    (2, "*"): (
        "What is the average SAT math score of schools in each county?",
        _trace("Average math score per county", "aggregation_query", 2, ["satscores", "schools"],
               [("County", "TEXT", "GROUP BY", "bucket by county"),
                ("AvgScrMath", "INTEGER", "AVG", "average score"),
                ("cds", "TEXT", "JOIN", "link to school"),
                ("CDSCode", "TEXT", "JOIN", "school key")],
               ["SELECT", "JOIN", "GROUP BY", "AVG"], "join on the school code, then aggregate",
               "One row per county with an average"),
        "SELECT s.County, AVG(t.AvgScrMath) FROM satscores t JOIN schools s "
        "ON t.cds = s.CDSCode GROUP BY s.County;",
    ),
    (3, "*"): (
        "Which schools score above the overall average SAT math score?",
        _trace("Schools above mean math score", "comparison_query", 3, ["satscores"],
               [("sname", "TEXT", "SELECT", "school name"),
                ("AvgScrMath", "INTEGER", "AVG", "compare with the mean")],
               ["SELECT", "WHERE", "SUBQUERY", "AVG"], "scalar subquery for the mean",
               "School names above the mean"),
        "SELECT sname FROM satscores WHERE AvgScrMath > (SELECT AVG(AvgScrMath) FROM satscores);",
    ),
    (4, "*"): (
        "Rank the schools by their average SAT math score.",
        _trace("Rank schools by math score", "ranking_query", 4, ["satscores"],
               [("sname", "TEXT", "SELECT", "school name"),
                ("AvgScrMath", "INTEGER", "ORDER BY DESC", "ranking key")],
               ["SELECT", "RANK() OVER"], "window function ranking", "Every school with its rank"),
        "SELECT sname, RANK() OVER (ORDER BY AvgScrMath DESC) AS math_rank FROM satscores;",
    ),
}

# column-name corruptions used to plant invalid-column errors
PLANTED_TYPOS = {"AvgScrMath": "AvgScrMth", "County": "Cnty", "sname": "snme"}


def payload_of(request: ChatRequest) -> dict:
    head, sep, body = request.user_text.partition("INPUT\n")
    if not sep:
        return {}
    return json.loads(body)


def task_of(request: ChatRequest) -> str:
    m = re.match(r"\[(\w+)\]", request.system_text)
    return m.group(1) if m else ""


class DemoResponder:
    """Callable ``ChatRequest -> str`` answering every prompt the package issues.

    ``plant_typo`` makes first-draft SQL misspell a column so the refinement
    loop has something to repair; ``repair`` controls whether corrections fix it.
    """

    def __init__(self, plant_typo: bool = False, repair: bool = True, judge_label: int = 1):
        self.plant_typo = plant_typo
        self.repair = repair
        self.judge_label = judge_label
        self.n_corrections = 0

    def __call__(self, request: ChatRequest) -> str:
        task = task_of(request)
        if task.startswith("kb_stage_"):
            return json.dumps(getattr(self, f"_stage{task[-1]}")(payload_of(request)))
        handler = {
            "generate_question": self._question,
            "generate_sql": self._sql,
            "correct": self._correct,
            "judge_consistency": self._judge,
        }.get(task)
        if handler is None:
            raise KeyError(f"DemoResponder has no rule for task {task!r}")
        return handler(request)

    # -- knowledge base --------------------------------------------------

    @staticmethod
    def _ddl_tables(ddl: str) -> dict[str, list[tuple[str, str, str]]]:
        tables = {}
        for name, body in re.findall(r"CREATE TABLE (\w+) \(\n(.*?)\n\);", ddl, re.DOTALL):
            cols = []
            for line in body.split(",\n"):
                line = line.strip()
                if line.startswith(("PRIMARY KEY", "FOREIGN KEY")):
                    continue
                parts = line.split()
                cols.append((parts[0], parts[1] if len(parts) > 1 else "", line))
            tables[name] = cols
        return tables

    def _stage1(self, payload):
        ddl = payload["schema_ddl"]
        tables = self._ddl_tables(ddl)
        fks = dict(re.findall(r"FOREIGN KEY \((\w+)\) REFERENCES (\w+\(\w+\))", ddl))
        pks = {n: re.findall(r"PRIMARY KEY \(([^)]*)\)", body)
               for n, body in re.findall(r"CREATE TABLE (\w+) \(\n(.*?)\n\);", ddl, re.DOTALL)}
        out = {"tables": [], "columns": []}
        for name, cols in tables.items():
            rows = payload["sample_rows"].get(name, {}).get("rows", [])
            out["tables"].append({"table": name, "description": f"records of {name}",
                                  "row_count_estimate": len(rows)})
            pk = [c.strip() for c in (pks.get(name) or [""])[0].split(",") if c.strip()]
            for col, ctype, _ in cols:
                if col in fks:
                    desc = f"identifier referencing {fks[col]}"
                elif col in pk or col.lower().endswith(("id", "code")):
                    desc = f"identifier of the {name} record"
                else:
                    desc = f"{col} ({ctype or 'untyped'})"
                out["columns"].append({"table": name, "column": col, "description": desc})
        return out

    def _stage2(self, payload):
        return {
            "domain_name": "education",
            "business_rules": [
                {"rule_id": "R1", "statement": "School codes identify schools; never average or sum them.",
                 "affected_tables": ["schools", "satscores"],
                 "affected_columns": ["schools.CDSCode", "satscores.cds"]},
                {"rule_id": "R2", "statement": "SAT averages are only comparable across schools with scores.",
                 "affected_tables": ["satscores"], "affected_columns": ["satscores.AvgScrMath"]},
            ] if "satscores" in payload["schema_ddl"] else [],
        }

    @staticmethod
    def _categorize(description: str, values: list) -> str:
        if description.startswith("identifier"):
            return "identifier"
        present = [v for v in values if v is not None]
        if present and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in present):
            return "quantitative"
        if present and len(set(present)) < len(present):
            return "categorical"
        return "free_text"

    def _stage3(self, payload):
        meta = payload["k1_metadata"]
        samples = payload["sample_rows"]
        out = []
        for c in meta["columns"]:
            block = samples.get(c["table"], {})
            idx = block.get("columns", []).index(c["column"]) if c["column"] in block.get("columns", []) else None
            values = [r[idx] for r in block.get("rows", [])] if idx is not None else []
            cat = self._categorize(c["description"], values)
            rec = {"table": c["table"], "column": c["column"], "semantic_category": cat,
                   "unit": None, "value_range": None,
                   "example_values": sorted({v for v in values if v is not None}, key=str)[:5]}
            if cat == "quantitative" and values:
                nums = [v for v in values if v is not None]
                rec["value_range"] = [min(nums), max(nums)]
                rec["unit"] = "points"
            out.append(rec)
        return {"columns": out}

    def _stage4(self, payload):
        by_cat = {
            "identifier": ["select", "filter", "group", "count"],
            "categorical": ["select", "filter", "group", "order", "count"],
            "quantitative": ["select", "filter", "order", "sum", "avg", "min", "max", "count"],
            "temporal": ["select", "filter", "group", "order", "min", "max", "count"],
            "free_text": ["select", "filter", "order", "count"],
        }
        out = []
        for ft in payload["k3_field_types"]["columns"]:
            out.append({"table": ft["table"], "column": ft["column"],
                        "meaning": f"{ft['semantic_category']} attribute {ft['column']}",
                        "allowed_operations": by_cat[ft["semantic_category"]],
                        "nullability": "NULL means unknown"})
        return {"columns": out}

    def _stage5(self, payload):
        ft = payload["k3_field_types"]["columns"]
        tables = [t["table"] for t in payload["k1_metadata"]["tables"]]
        out = []
        for i, t in enumerate(tables):
            refs = [c for c in payload["k1_metadata"]["columns"]
                    if c["table"] == t and "referencing" in c["description"]]
            role = "domain_attribute" if refs else "primary_entity"
            quant = [c["column"] for c in ft if c["table"] == t and c["semantic_category"] == "quantitative"]
            constraints = [{"statement": f"{q} is non-negative", "columns": [q]} for q in quant]
            out.append({"table": t, "role": role, "constraints": constraints})
        return {"tables": out}

    def _stage6(self, payload):
        # declared foreign keys are added by the builder; only cross-table rules here
        tables = sorted({c["table"] for c in payload["k3_field_types"]["columns"]})
        return {"join_edges": [],
                "derived_dependencies": [{"statement": "every score row belongs to one school",
                                          "tables": tables}] if len(tables) > 1 else []}

    # -- generation ------------------------------------------------------

    @staticmethod
    def _lookup(level: int, task: str):
        return LIBRARY.get((level, task)) or LIBRARY.get((level, "*"))

    def _question(self, request):
        p = payload_of(request)
        level = p["complexity_level"]
        entry = self._lookup(level, p["scenario"]["task_type"])
        if entry is None:
            table = p["knowledge"]["tables"][0]["table"]
            think = _trace(f"Count rows of {table}", "count_query", level, [table], [],
                           ["SELECT", "COUNT"], "count all rows", "One number")
            return json.dumps({"question": f"How many records does {table} hold?", "think": think})
        question, think, _ = entry
        return json.dumps({"question": question, "think": think})

    def _sql(self, request):
        p = payload_of(request)
        for question, _, sql in LIBRARY.values():
            if question == p["question"]:
                break
        else:
            sql = f"SELECT COUNT(*) FROM {p['think']['table_selection']['tables_used'][0]};"
        if self.plant_typo:
            for good, bad in PLANTED_TYPOS.items():
                if re.search(rf"\b{good}\b", sql):
                    sql = re.sub(rf"\b{good}\b", bad, sql, count=1)
                    break
        return f"```sql\n{sql}\n```"

    def _correct(self, request):
        p = payload_of(request)
        self.n_corrections += 1
        sql, question = p["sql"], p["question"]
        applied = []
        if not self.repair:
            # still broken, but a different SQL each time so the loop runs to its cap
            sql = f"{sql.rstrip(';').rstrip()} /* attempt {self.n_corrections} */;"
            return json.dumps({"question": question, "sql": sql, "think": p["think"],
                               "corrections": ["no change"]})
        for err in p["errors"]:
            if err["type"] == "invalid_column":
                bad = re.search(r"(?:column (?:reference )?)(?:\w+\.)?(\w+)", err["detail"]).group(1)
                cands = [e["key"].split(".")[-1] for e in p["evidence"] if e["layer"] == "K1" and "." in e["key"]]
                if cands:
                    sql = re.sub(rf"\b{re.escape(bad)}\b", cands[0], sql)
                    applied.append(f"replaced {bad} with {cands[0]}")
            elif err["type"] == "aggregation_type_mismatch":
                m = re.search(r"(AVG|SUM|TOTAL|MIN|MAX)\((\w+)\.(\w+)\)", err["detail"])
                if m:
                    col = m.group(3)
                    sql = re.sub(rf"\b{m.group(1)}\s*\(\s*((?:\w+\.)?{col})\s*\)", r"COUNT(\1)", sql,
                                 flags=re.IGNORECASE)
                    question = re.sub(r"^(What is|Show) the (average|total|sum of) .*? of",
                                      "How many", question) if p["may_edit_question"] else question
                    if p["may_edit_question"] and not question.startswith("How many"):
                        question = f"How many {col} values are recorded?"
                    applied.append(f"replaced {m.group(1)}({col}) with COUNT({col})")
        return json.dumps({"question": question, "sql": sql, "think": p["think"],
                           "corrections": applied})

    def _judge(self, request):
        return json.dumps({"label": self.judge_label, "reasoning": "matches the question"})
