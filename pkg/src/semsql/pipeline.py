"""Run orchestration: config, manifest, resumable stages and export."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import yaml

from . import kb as kbmod
from .errors import (
    ConfigInvalid,
    ConstraintViolation,
    IoFailure,
    LLMError,
    NonSelectOutput,
    SemSqlError,
    StageFailed,
)
from .introspect import DatabaseSchema, InstanceSample, introspect, sample_instances
from .llm import Gateway, OpenAICompatibleProvider, ProviderConfig, RecordingProvider, ScriptedProvider
from .metrics import contamination_filter, evaluate_corpus, load_eval_set
from .sqlanalysis import Level, classify_sql
from .synthesis import (
    DEFAULT_DOMAIN_CONTEXTS,
    DEFAULT_TASK_TYPES,
    GenerationSpec,
    Triple,
    dump_record,
    generate_draft,
    plan_batch,
    read_spool,
)
from .verification import AuditLog, refine

logger = logging.getLogger(__name__)

STAGES = ("introspect", "build_kb", "plan", "generate", "refine", "filter", "evaluate", "export")
EXPORT_KEYS = ("question", "think", "answer")

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2


# -- config -------------------------------------------------------------------

PROVIDER_KINDS = ("openai", "scripted", "demo")


@dataclass
class RunConfig:
    """Every knob of a run. Loaded from YAML or JSON; unknown keys are rejected."""

    db_path: str
    run_dir: str
    level_quotas: dict[str, int]
    provider: dict[str, Any] = field(default_factory=lambda: {"kind": "demo"})
    domain_contexts: list[str] = field(default_factory=lambda: list(DEFAULT_DOMAIN_CONTEXTS))
    task_types: list[str] = field(default_factory=lambda: list(DEFAULT_TASK_TYPES))
    root_seed: int = 0
    sample_rows_per_table: int = 20
    max_iterations: int = 3
    statement_timeout: float = 5.0
    ngram_n: int = 8
    ngram_threshold: float = 0.6
    eval_set: str | None = None
    with_sa: bool = False
    embedder: str = "offline"
    workers: int = 4

    def __post_init__(self):
        try:
            quotas = {str(Level.parse(k)): int(v) for k, v in dict(self.level_quotas).items()}
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(f"level_quotas: {exc}") from exc
        if any(v < 0 for v in quotas.values()):
            raise ConfigInvalid("level_quotas must be non-negative")
        if sum(quotas.values()) == 0:
            raise ConfigInvalid("level_quotas are all zero; nothing to generate")
        self.level_quotas = dict(sorted(quotas.items()))
        if not self.domain_contexts or not self.task_types:
            raise ConfigInvalid("domain_contexts and task_types must be non-empty")
        kind = self.provider.get("kind")
        if kind not in PROVIDER_KINDS:
            raise ConfigInvalid(f"provider.kind must be one of {PROVIDER_KINDS}, got {kind!r}")
        if kind == "scripted" and not self.provider.get("script_path"):
            raise ConfigInvalid("provider.kind=scripted needs provider.script_path")
        if kind == "openai" and not (self.provider.get("endpoint_url") and self.provider.get("model_id")):
            raise ConfigInvalid("provider.kind=openai needs endpoint_url and model_id")
        if "api_key" in self.provider:
            raise ConfigInvalid("API keys are read from the environment only; use provider.api_key_env")
        if self.max_iterations < 1:
            raise ConfigInvalid("max_iterations must be >= 1")
        if self.ngram_n < 2 or not 0.0 <= self.ngram_threshold <= 1.0:
            raise ConfigInvalid("ngram_n must be >= 2 and ngram_threshold in [0, 1]")
        if self.embedder not in ("offline", "provider"):
            raise ConfigInvalid("embedder must be 'offline' or 'provider'")
        if self.sample_rows_per_table < 1 or self.workers < 1:
            raise ConfigInvalid("sample_rows_per_table and workers must be positive")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigInvalid("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {unknown}")
        missing = sorted(k for k in ("db_path", "run_dir", "level_quotas") if k not in data)
        if missing:
            raise ConfigInvalid(f"missing config keys: {missing}")
        data = dict(data)
        if base_dir is not None:
            # relative paths are taken relative to the config file
            for key in ("db_path", "run_dir", "eval_set"):
                if data.get(key) and not os.path.isabs(data[key]):
                    data[key] = str(Path(base_dir) / data[key])
            prov = dict(data.get("provider") or {})
            if prov.get("script_path") and not os.path.isabs(prov["script_path"]):
                prov["script_path"] = str(Path(base_dir) / prov["script_path"])
                data["provider"] = prov
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config {path} is not valid YAML/JSON: {exc}") from exc
    return RunConfig.from_dict(data, base_dir=path.parent)


def build_gateway(config: RunConfig) -> Gateway:
    prov = config.provider
    kind = prov["kind"]
    cap = int(prov.get("concurrency_cap", config.workers))
    retries = int(prov.get("max_retries", 3))
    if kind == "scripted":
        provider = ScriptedProvider.from_file(prov["script_path"])
    elif kind == "demo":
        from .demo import DemoResponder
        provider = RecordingProvider(DemoResponder(plant_typo=bool(prov.get("plant_typo", False))))
    else:
        provider = OpenAICompatibleProvider(ProviderConfig(
            endpoint_url=prov["endpoint_url"],
            model_id=prov["model_id"],
            api_key_source=prov.get("api_key_env", "OPENAI_API_KEY"),
            timeout=float(prov.get("timeout", 60)),
            max_retries=retries,
            concurrency_cap=cap,
        ))
    return Gateway(provider, max_retries=retries, concurrency_cap=cap)


# -- manifest -------------------------------------------------------------------

@dataclass
class RunManifest:
    run_id: str
    config: dict
    stages: dict[str, dict] = field(default_factory=dict)
    counters: dict[str, int] = field(
        default_factory=lambda: {"drafted": 0, "verified": 0, "rejected": 0, "filtered": 0})
    kb_fingerprint: str | None = None
    failed_stage: str | None = None
    export_count: int | None = None

    def done(self, stage: str) -> bool:
        return bool(self.stages.get(stage, {}).get("done"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunManifest:
        return cls(**data)


def _hash_files(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes() if p.exists() else b"<missing>")
    return h.hexdigest()


def _hash_text(*parts: str) -> str:
    return hashlib.sha256("\x1f".join(parts).encode()).hexdigest()


# -- export -----------------------------------------------------------------------

def export_record(triple: Triple) -> dict:
    record = triple.to_record(include_meta=False)
    return {k: record[k] for k in EXPORT_KEYS}


def export(corpus: list[Triple], path: str | Path) -> int:
    """Write verified samples as JSONL (question/think/answer), UTF-8 with ``\\n`` endings."""
    lines = []
    for t in corpus:
        if t.status != "verified":
            raise ValueError(f"refusing to export {t.sample_id} with status {t.status!r}")
        lines.append(dump_record(export_record(t)) + "\n")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise IoFailure(f"cannot write export {path}: {exc}") from exc
    return len(lines)


# -- pipeline ---------------------------------------------------------------------

class Pipeline:
    """Stage runner over one run directory.

    Every stage records an input fingerprint (config plus the previous stage's
    output) and an output fingerprint. A stage is skipped on rerun when it is
    done and its input fingerprint still matches. Generation and refinement
    spool one line per sample, so an interrupted stage resumes per sample.
    """

    def __init__(self, config: RunConfig, gateway: Gateway | None = None):
        self.config = config
        self.run_dir = Path(config.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._gateway = gateway
        self._spool_lock = threading.Lock()
        self.manifest = self._load_or_create_manifest()
        self._schema: DatabaseSchema | None = None
        self._kb: kbmod.KnowledgeBase | None = None

    # paths
    def path(self, name: str) -> Path:
        return self.run_dir / name

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            self._gateway = build_gateway(self.config)
        return self._gateway

    @property
    def manifest_path(self) -> Path:
        return self.path("manifest.json")

    def _load_or_create_manifest(self) -> RunManifest:
        if self.manifest_path.exists():
            manifest = RunManifest.from_dict(json.loads(self.manifest_path.read_text(encoding="utf-8")))
            if manifest.config != self.config.to_dict():
                raise ConfigInvalid(
                    f"run directory {self.run_dir} was started with a different config; "
                    "use a fresh run_dir")
            return manifest
        manifest = RunManifest(run_id=uuid.uuid4().hex[:12], config=self.config.to_dict())
        self._write_manifest(manifest)
        return manifest

    def _write_manifest(self, manifest: RunManifest | None = None) -> None:
        manifest = manifest or self.manifest
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(self.manifest_path)

    # shared state
    def schema(self) -> DatabaseSchema:
        if self._schema is None:
            self._require("introspect")
            self._schema = DatabaseSchema.from_dict(json.loads(self.path("schema.json").read_text()))
        return self._schema

    def sample(self) -> InstanceSample:
        return InstanceSample.from_dict(json.loads(self.path("sample.json").read_text()))

    def knowledge_base(self) -> kbmod.KnowledgeBase:
        if self._kb is None:
            self._require("build_kb")
            self._kb = kbmod.KBStore(self.path("kb")).load()
        return self._kb

    def _require(self, stage: str) -> None:
        if not self.manifest.done(stage):
            raise StageFailed(stage, f"stage {stage!r} has not completed")

    def _input_fingerprint(self, stage: str) -> str:
        idx = STAGES.index(stage)
        prev = self.manifest.stages.get(STAGES[idx - 1], {}).get("output_fingerprint", "") if idx else ""
        return _hash_text(self.config.fingerprint(), stage, prev)

    def is_fresh(self, stage: str) -> bool:
        rec = self.manifest.stages.get(stage, {})
        return bool(rec.get("done")) and rec.get("input_fingerprint") == self._input_fingerprint(stage)

    # driver
    def run(self, until: str | None = None) -> RunManifest:
        """Run every stage in order, skipping fresh ones; stop after ``until`` if given."""
        last = STAGES.index(until) if until else len(STAGES) - 1
        for stage in STAGES[:last + 1]:
            if self.is_fresh(stage):
                logger.info("stage %s is up to date, skipping", stage)
                continue
            self.run_stage(stage)
        return self.manifest

    def run_stage(self, stage: str) -> None:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        idx = STAGES.index(stage)
        if idx:
            self._require(STAGES[idx - 1])
        input_fp = self._input_fingerprint(stage)
        # a rerun invalidates everything downstream
        for later in STAGES[idx:]:
            self.manifest.stages.pop(later, None)
        self.manifest.failed_stage = None
        self._write_manifest()
        try:
            output_fp = getattr(self, f"_stage_{stage}")()
        except StageFailed as exc:
            self._fail(stage)
            raise exc
        except (SemSqlError, OSError, ValueError) as exc:
            self._fail(stage)
            raise StageFailed(stage, str(exc)) from exc
        self.manifest.stages[stage] = {"done": True, "input_fingerprint": input_fp,
                                       "output_fingerprint": output_fp}
        self._write_manifest()

    def _fail(self, stage: str) -> None:
        self.manifest.failed_stage = stage
        self._write_manifest()

    # stages
    def _stage_introspect(self) -> str:
        schema = introspect(self.config.db_path)
        sample = sample_instances(schema, self.config.db_path,
                                  self.config.sample_rows_per_table, self.config.root_seed)
        self._write_json("schema.json", schema.to_dict())
        self._write_json("sample.json", sample.to_dict())
        self._schema = schema
        return _hash_files(self.path("schema.json"), self.path("sample.json"))

    def _stage_build_kb(self) -> str:
        store = kbmod.KBStore(self.path("kb"))
        kb = kbmod.build(self.schema(), self.sample(), self.gateway, store)
        self._kb = kb
        self.manifest.kb_fingerprint = kb.fingerprint()
        return kb.fingerprint()

    def _stage_plan(self) -> str:
        specs = plan_batch(self.config.domain_contexts, self.config.task_types,
                           self.config.level_quotas, self.config.root_seed)
        lines = [json.dumps({"sample_id": s.sample_id(i), "spec": s.to_dict()}, sort_keys=True)
                 for i, s in enumerate(specs)]
        self.path("plan.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        return _hash_files(self.path("plan.jsonl"))

    def planned(self) -> list[tuple[str, GenerationSpec]]:
        self._require("plan")
        rows = [json.loads(l) for l in self.path("plan.jsonl").read_text(encoding="utf-8").splitlines() if l]
        return [(r["sample_id"], GenerationSpec.from_dict(r["spec"])) for r in rows]

    def _spool(self, name: str, record: dict) -> None:
        with self._spool_lock, open(self.path(name), "a", encoding="utf-8", newline="\n") as fh:
            fh.write(dump_record(record) + "\n")

    def _read(self, name: str) -> list[dict]:
        p = self.path(name)
        if not p.exists():
            return []
        return [json.loads(l) for l in p.read_text(encoding="utf-8").splitlines() if l]

    def _parallel(self, fn: Callable, items: list) -> None:
        if not items:
            return
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            for _ in pool.map(fn, items):
                pass

    def _stage_generate(self) -> str:
        kb, schema = self.knowledge_base(), self.schema()
        if not kb.complete:
            raise StageFailed("generate", "knowledge base is incomplete")
        done = {r["meta"]["sample_id"] for r in self._read("drafts.jsonl")}
        done |= {r["sample_id"] for r in self._read("generation_rejects.jsonl")}
        todo = [(sid, spec) for sid, spec in self.planned() if sid not in done]

        def work(item):
            sid, spec = item
            try:
                triple = generate_draft(kb, spec, self.gateway, schema, sid)
            except (ConstraintViolation, NonSelectOutput, LLMError) as exc:
                self._spool("generation_rejects.jsonl", {
                    "sample_id": sid, "spec": spec.to_dict(),
                    "reason": type(exc).__name__, "detail": str(exc)})
                return
            try:
                got = classify_sql(triple.sql, schema)
                if got.level != spec.level:
                    triple.notes["complexity_mismatch"] = {"requested": str(spec.level),
                                                           "classified": str(got.level)}
            except SemSqlError:
                pass  # the refinement stage reports parse failures
            self._spool("drafts.jsonl", triple.to_record())

        self._parallel(work, todo)
        drafts = self._read("drafts.jsonl")
        rejects = self._read("generation_rejects.jsonl")
        self.manifest.counters["drafted"] = len(drafts) + len(rejects)
        return _hash_text(*sorted(dump_record(r) for r in drafts + rejects))

    def drafts(self) -> list[Triple]:
        return sorted((Triple.from_record(r) for r in self._read("drafts.jsonl")),
                      key=lambda t: t.sample_id)

    def _stage_refine(self) -> str:
        kb, schema = self.knowledge_base(), self.schema()
        audit = AuditLog(self.path("audit.jsonl"))
        done = {r["meta"]["sample_id"] for r in self._read("verified.jsonl") + self._read("rejected.jsonl")}
        todo = [t for t in self.drafts() if t.sample_id not in done]

        def work(triple: Triple):
            outcome = refine(triple, kb, self.config.db_path, self.gateway, schema,
                             self.config.max_iterations, audit, self.config.statement_timeout)
            result = outcome.triple
            result.notes["iterations"] = outcome.iterations_used
            result.notes["terminal"] = outcome.terminal
            self._spool("verified.jsonl" if result.status == "verified" else "rejected.jsonl",
                        result.to_record())

        self._parallel(work, todo)
        verified = self._read("verified.jsonl")
        rejected = self._read("rejected.jsonl")
        self.manifest.counters["verified"] = len(verified)
        self.manifest.counters["rejected"] = len(rejected) + len(self._read("generation_rejects.jsonl"))
        return _hash_text(*sorted(dump_record(r) for r in verified + rejected))

    def verified(self) -> list[Triple]:
        return sorted((Triple.from_record(r) for r in self._read("verified.jsonl")),
                      key=lambda t: t.sample_id)

    def _stage_filter(self) -> str:
        corpus = self.verified()
        if self.config.eval_set:
            eval_pairs = load_eval_set(self.config.eval_set)
            kept, removed = contamination_filter(corpus, eval_pairs, self.config.ngram_n,
                                                 self.config.ngram_threshold)
        else:
            kept, removed = corpus, []
        by_id = {t.sample_id: t for t in corpus}
        filtered_lines = []
        for r in removed:
            rec = by_id[r.sample_id].to_record()
            rec["meta"]["filter"] = r.to_dict()
            filtered_lines.append(dump_record(rec) + "\n")
        self.path("filtered.jsonl").write_text("".join(filtered_lines), encoding="utf-8")
        self.path("kept.jsonl").write_text(
            "".join(dump_record(t.to_record()) + "\n" for t in kept), encoding="utf-8")
        self.manifest.counters["filtered"] = len(removed)
        return _hash_files(self.path("kept.jsonl"), self.path("filtered.jsonl"))

    def kept(self) -> list[Triple]:
        return [Triple.from_record(r) for r in self._read("kept.jsonl")]

    def _stage_evaluate(self) -> str:
        corpus = self.kept()
        if not corpus:
            self._write_json("report.json", {"n_samples": 0})
            return _hash_files(self.path("report.json"))
        embedder = None
        if self.config.embedder == "provider":
            embedder = self.gateway.embed
        report = evaluate_corpus(corpus, self.config.db_path, self.schema(),
                                 self.gateway if self.config.with_sa else None,
                                 embedder, self.config.statement_timeout)
        report.filter_params = {"n": self.config.ngram_n, "threshold": self.config.ngram_threshold,
                                "eval_set": self.config.eval_set}
        self._write_json("report.json", report.to_dict())
        self.path("report.txt").write_text(report.to_table() + "\n", encoding="utf-8")
        return _hash_files(self.path("report.json"))

    def _stage_export(self) -> str:
        count = export(self.kept(), self.path("export.jsonl"))
        self.manifest.export_count = count
        return _hash_files(self.path("export.jsonl"))

    def _write_json(self, name: str, data: Any) -> None:
        self.path(name).write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                                   encoding="utf-8")

    @property
    def export_path(self) -> Path:
        return self.path("export.jsonl")


def run_pipeline(config: RunConfig, gateway: Gateway | None = None, until: str | None = None) -> RunManifest:
    return Pipeline(config, gateway).run(until)


def exit_code(manifest: RunManifest) -> int:
    """0 iff the export holds at least one record."""
    return EXIT_OK if (manifest.export_count or 0) >= 1 else EXIT_STAGE_FAILURE
