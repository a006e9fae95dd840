"""Knowledge-grounded text-to-SQL data synthesis with diagnose/correct refinement."""

from .errors import SemSqlError
from .introspect import DatabaseSchema, InstanceSample, execute_readonly, introspect, sample_instances
from .kb import KnowledgeBase, build as build_kb, retrieve
from .llm import ChatRequest, Gateway, RecordingProvider, ScriptedProvider
from .metrics import compute_ser, contamination_filter, diversity, evaluate_corpus
from .pipeline import Pipeline, RunConfig, export, load_config, run_pipeline
from .sqlanalysis import Level, classify_complexity, classify_sql, extract_facts
from .synthesis import GenerationSpec, RationaleTrace, Triple, plan_batch
from .verification import diagnose, refine

__version__ = "0.1.0"

__all__ = [
    "ChatRequest", "DatabaseSchema", "Gateway", "GenerationSpec", "InstanceSample",
    "KnowledgeBase", "Level", "Pipeline", "RationaleTrace", "RecordingProvider", "RunConfig",
    "ScriptedProvider", "SemSqlError", "Triple", "build_kb", "classify_complexity", "classify_sql",
    "compute_ser", "contamination_filter", "diagnose", "diversity", "evaluate_corpus",
    "execute_readonly", "export", "extract_facts", "introspect", "load_config", "plan_batch",
    "refine", "retrieve", "run_pipeline", "sample_instances",
]
