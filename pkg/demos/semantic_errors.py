# Queries that run fine but mean nothing.
#
# Averaging a school code executes on SQLite and returns a number. The knowledge
# base knows CDSCode is an identifier, so diagnosis flags it anyway.

import tempfile
from pathlib import Path

from semsql import Gateway, RecordingProvider, build_kb, diagnose, introspect, refine, sample_instances
from semsql.demo import DemoResponder, make_demo_db
from semsql.sqlanalysis import Level
from semsql.synthesis import GenerationSpec, RationaleTrace, Triple

db = make_demo_db(Path(tempfile.mkdtemp()) / "schools.db")
schema = introspect(db)
gateway = Gateway(RecordingProvider(DemoResponder()))
kb = build_kb(schema, sample_instances(schema, db), gateway)

print("CDSCode is", kb.field_type("schools", "CDSCode").semantic_category)


def triple(question, sql, tables, columns):
    trace = RationaleTrace.model_validate({
        "focus": question,
        "metadata": {"main_scenario": "aggregate", "sub_scenario": "demo", "complexity_level": 1,
                     "use_case": "demo"},
        "table_selection": {"tables_used": tables, "reasoning": "demo"},
        "column_selection": {"columns_used": [
            {"name": c, "type": "TEXT", "operation": "AVG", "purpose": "demo"} for c in columns]},
        "sql_strategy": {"operations": ["SELECT"], "approach": "demo", "no_need": []},
        "expected_output": "one number",
    })
    return Triple(question, sql, trace, sample_id="demo",
                  spec=GenerationSpec("education", "aggregation", Level.L1, 0))


# # Diagnose

bad = triple("What is the average code of schools?", "SELECT AVG(CDSCode) FROM schools;",
             ["schools"], ["CDSCode"])
report = diagnose(bad, kb, db, schema)
print("executes:", report.execution.success)
for err in report.errors:
    print(f"  {err.error_type} at {err.trace_location}: {err.detail}")

# # Retrieve evidence and correct

outcome = refine(bad, kb, db, gateway, schema)
print("terminal:", outcome.terminal, "after", outcome.iterations_used, "correction(s)")
print("question:", outcome.triple.question)
print("sql:     ", outcome.triple.sql)
for entry in outcome.triple.rationale.refinement_log:
    print("  log:", entry.iteration, entry.corrections)

# A join on columns with no recorded relationship is flagged too.
odd_join = triple("Which schools share a name with a county?",
                  "SELECT sname FROM satscores JOIN schools ON satscores.sname = schools.County;",
                  ["satscores", "schools"], [])
print(sorted(diagnose(odd_join, kb, db, schema).error_types))
