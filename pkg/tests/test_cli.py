import io
import json
import subprocess
import sys

import pytest
import yaml

from semsql.cli import main
from semsql.pipeline import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILURE

from conftest import worked_triple


def _write_config(tmp_path, demo_db, **kw):
    data = {"db_path": str(demo_db), "run_dir": str(tmp_path / "run"), "level_quotas": {"L1": 2}, **kw}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_pipeline_command(tmp_path, demo_db, capsys):
    cfg = _write_config(tmp_path, demo_db)
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["export_count"] == 2
    assert len((tmp_path / "run" / "export.jsonl").read_text().splitlines()) == 2


def test_stage_commands_in_order(tmp_path, demo_db, capsys):
    cfg = str(_write_config(tmp_path, demo_db))
    for cmd in ("introspect", "build-kb", "plan", "generate", "refine", "filter"):
        assert main([cmd, "--config", cfg]) == EXIT_OK, cmd
    assert main(["evaluate", "--config", cfg]) == EXIT_OK
    assert "SER" in capsys.readouterr().out
    assert main(["export", "--config", cfg]) == EXIT_OK
    assert "exported 2 record(s)" in capsys.readouterr().out


def test_stage_out_of_order_fails(tmp_path, demo_db, capsys):
    cfg = str(_write_config(tmp_path, demo_db))
    assert main(["generate", "--config", cfg]) == EXIT_STAGE_FAILURE
    assert "stage failed" in capsys.readouterr().err


def test_all_zero_quotas_exit_2(tmp_path, demo_db, capsys):
    cfg = _write_config(tmp_path, demo_db, level_quotas={"L1": 0, "L2": 0, "L3": 0, "L4": 0})
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_CONFIG_ERROR
    assert "config error" in capsys.readouterr().err


def test_empty_export_exit_1(tmp_path, demo_db):
    ref = worked_triple()
    eval_path = tmp_path / "eval.jsonl"
    eval_path.write_text(json.dumps({"question": ref.question, "sql": ref.sql}) + "\n")
    cfg = _write_config(tmp_path, demo_db, level_quotas={"L1": 1}, eval_set=str(eval_path),
                        domain_contexts=["education"], task_types=["ranking"])
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_STAGE_FAILURE


def test_classify_reads_stdin(monkeypatch, capsys, demo_db):
    sqls = ["SELECT sname FROM satscores ORDER BY AvgScrMath DESC LIMIT 1;",
            "WITH t AS (SELECT 1) SELECT * FROM t",
            "",
            "SELEC broken"]
    monkeypatch.setattr(sys, "stdin", io.StringIO("\n".join(sqls) + "\n"))
    assert main(["classify", "--db", str(demo_db)]) == EXIT_STAGE_FAILURE
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert rows[0] == {"level": 1, "matched_features": ["limit", "order_by"]}
    assert rows[1]["level"] == 4 and "cte" in rows[1]["matched_features"]
    assert rows[2]["error"] in {"SqlParseError", "UnsupportedDialect"}


def test_evaluate_external_corpus(tmp_path, demo_db, capsys):
    corpus = tmp_path / "corpus.jsonl"
    recs = [{"question": "a?", "think": {}, "answer": "SELECT sname FROM satscores"},
            {"question": "b?", "think": {}, "answer": "SELECT County FROM schools"},
            {"question": "c?", "think": {}, "answer": "SELECT bogus FROM schools"},
            {"question": "d?", "think": {}, "answer": "SELECT COUNT(*) FROM schools"}]
    corpus.write_text("".join(json.dumps(r) + "\n" for r in recs))
    out = tmp_path / "report.json"
    assert main(["evaluate", "--corpus", str(corpus), "--db", str(demo_db), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["ser"] == 0.75 and report["n_samples"] == 4 and report["sa"] is None
    assert "SER" in capsys.readouterr().out


def test_evaluate_corpus_needs_db(tmp_path):
    assert main(["evaluate", "--corpus", str(tmp_path / "c.jsonl")]) == EXIT_CONFIG_ERROR


def test_api_key_flag_does_not_exist():
    with pytest.raises(SystemExit):
        main(["pipeline", "--config", "x", "--api-key", "sk"])


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "semsql", "classify"], input="SELECT 1\n",
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["level"] == 1
