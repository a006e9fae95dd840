import copy
from pathlib import Path

import pytest

from semsql.demo import WORKED_EXAMPLE, DemoResponder, make_demo_db
from semsql.introspect import introspect, sample_instances
from semsql.kb import build
from semsql.llm import Gateway, RecordingProvider, ScriptedProvider
from semsql.sqlanalysis import Level
from semsql.synthesis import GenerationSpec, RationaleTrace, Triple


def no_sleep(_seconds):
    pass


def scripted_gateway(script_path, **kw):
    return Gateway(ScriptedProvider.from_file(script_path), sleep=no_sleep, **kw)


def record_script(responder, run, path: Path) -> Path:
    """Run ``run(gateway)`` against a rule-based responder and save the fingerprint script."""
    rec = RecordingProvider(responder)
    run(Gateway(rec, sleep=no_sleep))
    rec.save(path)
    return path


def worked_triple(**overrides) -> Triple:
    ex = copy.deepcopy(WORKED_EXAMPLE)
    t = Triple(ex["question"], ex["answer"], RationaleTrace.model_validate(ex["think"]),
               sample_id="s00000-test",
               spec=GenerationSpec("education", "ranking", Level.L1, 0))
    for k, v in overrides.items():
        setattr(t, k, v)
    return t


def make_triple(sql, tables, columns=(), level=1, question="q?") -> Triple:
    think = {
        "focus": "f",
        "metadata": {"main_scenario": "s", "sub_scenario": "s", "complexity_level": level, "use_case": "u"},
        "table_selection": {"tables_used": list(tables), "reasoning": "r"},
        "column_selection": {"columns_used": [
            {"name": c, "type": "TEXT", "operation": "SELECT", "purpose": "p"} for c in columns]},
        "sql_strategy": {"operations": [], "approach": "", "no_need": []},
        "expected_output": "e",
    }
    return Triple(question, sql, RationaleTrace.model_validate(think), sample_id="s-test",
                  spec=GenerationSpec("education", "ranking", Level(level), 0))


@pytest.fixture(scope="session")
def demo_db(tmp_path_factory):
    return make_demo_db(tmp_path_factory.mktemp("db") / "fixture.db")


@pytest.fixture(scope="session")
def schema(demo_db):
    return introspect(demo_db)


@pytest.fixture(scope="session")
def sample(schema, demo_db):
    return sample_instances(schema, demo_db)


@pytest.fixture(scope="session")
def kb_script(tmp_path_factory, schema, sample):
    path = tmp_path_factory.mktemp("scripts") / "kb_script.json"
    return record_script(DemoResponder(), lambda gw: build(schema, sample, gw), path)


@pytest.fixture(scope="session")
def kb(kb_script, schema, sample):
    return build(schema, sample, scripted_gateway(kb_script))


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, description: str, checks: dict[str, bool]) -> None:
    """Print and remember one PASS/FAIL line, then fail the test if any check failed."""
    failed = [name for name, ok in checks.items() if not ok]
    line = f"{'PASS' if not failed else 'FAIL'} criterion {number}: {description}"
    if failed:
        line += f" (failed: {', '.join(failed)})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not failed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
