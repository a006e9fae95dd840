# End-to-end run on a tiny two-table school database.
#
# The demo provider is a rule-based stand-in for an LLM, so this runs offline.
# Swap the provider block for {"kind": "openai", "endpoint_url": ..., "model_id": ...}
# and export the key in OPENAI_API_KEY to use a real model.

import json
import tempfile
from pathlib import Path

from semsql import Pipeline, RunConfig
from semsql.demo import make_demo_db

work = Path(tempfile.mkdtemp(prefix="semsql-quickstart-"))
db = make_demo_db(work / "schools.db")

config = RunConfig(
    db_path=str(db),
    run_dir=str(work / "run"),
    level_quotas={"L1": 2, "L2": 1, "L3": 1, "L4": 1},
    provider={"kind": "demo", "plant_typo": True},  # every draft gets one misspelt column
)

# # Run every stage

pipe = Pipeline(config)
manifest = pipe.run()
print("counters:", manifest.counters)

# Each planted typo was caught by diagnosis and repaired in one correction round.
for line in pipe.path("verified.jsonl").read_text().splitlines():
    rec = json.loads(line)
    log = rec["think"].get("refinement_log", [])
    print(rec["meta"]["sample_id"], "corrections:", len(log), "|", rec["answer"])

# # Corpus report

print(pipe.path("report.txt").read_text())

# # Exported training records

first = json.loads(pipe.export_path.read_text().splitlines()[0])
print(json.dumps(first, indent=2)[:800])

# Rerunning the same config is a no-op: every stage is fresh and gets skipped.
pipe.run()
print("exported", manifest.export_count, "records to", pipe.export_path)
