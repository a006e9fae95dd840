"""Intrinsic corpus metrics and the n-gram contamination filter."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import LLMError, SqlParseError, TooFewSamples, UnsupportedDialect
from .introspect import DatabaseSchema, execute_readonly
from .llm import JUDGE_TEMPERATURE, ChatRequest, Gateway
from .sqlanalysis import classify_sql
from .synthesis import Triple

logger = logging.getLogger(__name__)

EMBED_DIM = 256
DEFAULT_NGRAM_N = 8
DEFAULT_NGRAM_THRESHOLD = 0.6


def _sql_of(item) -> str:
    return item.sql if isinstance(item, Triple) else item


def _question_of(item) -> str:
    return item.question if isinstance(item, Triple) else item[0]


# -- execution rate -----------------------------------------------------------

def executability(corpus: Sequence, db_path: str | Path, timeout: float = 5.0,
                  workers: int = 4) -> list[bool]:
    sqls = [_sql_of(x) for x in corpus]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda s: execute_readonly(db_path, s, timeout).success, sqls))
    return results


def compute_ser(corpus: Sequence, db_path: str | Path, timeout: float = 5.0) -> float:
    """Fraction of queries the engine runs without error. ``corpus`` holds triples or SQL strings."""
    if not corpus:
        raise ValueError("SER needs a non-empty corpus")
    flags = executability(corpus, db_path, timeout)
    return sum(flags) / len(flags)


# -- semantic alignment ---------------------------------------------------------

class ConsistencyLabel(BaseModel):
    model_config = ConfigDict(extra="ignore")

    label: int
    reasoning: str = ""


def consistency_request(schema_text: str, question: str, sql: str) -> ChatRequest:
    system = (
        "[judge_consistency] You judge whether a SQL query correctly answers a natural-language "
        "question over the given database schema.\n"
        "Label 1 (consistent) when the query reads the right tables and columns and applies the "
        "right joins, filters, aggregations and ordering, returning exactly what was asked.\n"
        "Label 0 (inconsistent) when it reads wrong tables or columns, joins incorrectly or misses "
        "a needed join, filters, aggregates or orders wrongly, or returns irrelevant or "
        "incomplete data.\n"
        "Work through it: find what the question asks for, check the tables and columns against "
        "the schema, check joins, filters and aggregations against the intent, confirm the result "
        "answers the question in full.\n"
        'Output: {"label": 0 or 1, "reasoning": brief explanation}'
    )
    user = f"Database schema:\n{schema_text}\n\nQuestion:\n{question}\n\nSQL query:\n{sql}"
    return ChatRequest(system, user, temperature=JUDGE_TEMPERATURE,
                       response_schema_tag="structured_record")


@dataclass
class SAResult:
    sa: float | None
    subset_size: int
    labels: list[dict] = field(default_factory=list)


def judge_sa(
    corpus: Sequence[Triple],
    schema: DatabaseSchema,
    gateway: Gateway,
    executable: Sequence[bool] | None = None,
    workers: int = 4,
) -> SAResult:
    """LLM-judged question/SQL consistency over the executable subset only.

    Unparseable judge replies count as label 0 with the failure recorded.
    """
    flags = list(executable) if executable is not None else [True] * len(corpus)
    subset = [t for t, ok in zip(corpus, flags) if ok]
    if not subset:
        return SAResult(None, 0, [])
    schema_text = schema.to_ddl()

    def judge(t: Triple) -> dict:
        req = consistency_request(schema_text, t.question, t.sql)
        try:
            got = gateway.complete_structured(req, ConsistencyLabel)
            label = 1 if got.label == 1 else 0
            return {"sample_id": t.sample_id, "label": label, "reasoning": got.reasoning}
        except LLMError as exc:
            return {"sample_id": t.sample_id, "label": 0, "reasoning": f"judge failure: {exc}"}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        labels = list(pool.map(judge, subset))
    return SAResult(sum(l["label"] for l in labels) / len(labels), len(labels), labels)


# -- embeddings & diversity -------------------------------------------------------

def _bucket(gram: str, dim: int) -> int:
    return int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little") % dim


def char_trigrams(text: str) -> list[str]:
    return [text[i:i + 3] for i in range(len(text) - 2)]


def embed_offline(sql: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Hashed character-trigram term frequencies, L2-normalized.

    Strings shorter than three characters have no trigrams and map to the
    zero vector.
    """
    vec = np.zeros(dim)
    for gram in char_trigrams(sql):
        vec[_bucket(gram, dim)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _pairwise_l2(X: np.ndarray, budget: int = 1 << 22) -> np.ndarray:
    """Exact distance matrix from explicit differences, in row blocks to bound memory.

    The Gram-matrix shortcut loses precision to cancellation on near-identical vectors.
    """
    n = len(X)
    block = max(1, budget // max(1, n * X.shape[1]))
    D = np.empty((n, n))
    for start in range(0, n, block):
        diff = X[start:start + block, None, :] - X[None, :, :]
        D[start:start + block] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return D


def diversity(
    corpus: Sequence,
    embedder: Callable[[list[str]], np.ndarray] | None = None,
) -> tuple[float, float]:
    """Mean pairwise L2 distance and mean nearest-neighbour distance of SQL embeddings.

    ``corpus`` may hold triples, SQL strings, or precomputed vectors. Zero
    vectors are dropped with a warning.
    """
    items = list(corpus)
    if items and isinstance(items[0], (np.ndarray, list, tuple)) and not isinstance(items[0], Triple):
        X = np.asarray(items, dtype=float)
    else:
        texts = [_sql_of(x) for x in items]
        X = (np.asarray(embedder(texts), dtype=float) if embedder is not None
             else np.array([embed_offline(t) for t in texts]).reshape(len(texts), EMBED_DIM))
    if len(X):
        keep = np.linalg.norm(X, axis=1) > 0
        if not keep.all():
            logger.warning("dropping %d zero embedding(s) from diversity", int((~keep).sum()))
        X = X[keep]
    n = len(X)
    if n < 2:
        raise TooFewSamples(f"diversity needs at least 2 non-empty samples, got {n}")
    D = _pairwise_l2(X)
    iu = np.triu_indices(n, k=1)
    mean_l2 = float(D[iu].mean())
    np.fill_diagonal(D, np.inf)
    one_nn = float(D.min(axis=1).mean())
    return mean_l2, one_nn


# -- contamination filter ---------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Case-folded word tokens; whitespace and punctuation separate."""
    return _TOKEN_RE.findall(text.casefold())


def ngram_set(text: str, n: int) -> frozenset[tuple[str, ...]]:
    toks = tokenize(text)
    if not toks:
        return frozenset()
    if len(toks) < n:
        return frozenset({tuple(toks)})
    return frozenset(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


@dataclass
class Removal:
    sample_id: str
    eval_index: int
    field: str
    score: float

    def to_dict(self) -> dict:
        return asdict(self)


def contamination_filter(
    corpus: Sequence[Triple],
    eval_set: Sequence[tuple[str, str]],
    n: int = DEFAULT_NGRAM_N,
    threshold: float = DEFAULT_NGRAM_THRESHOLD,
) -> tuple[list[Triple], list[Removal]]:
    """Drop samples whose question or SQL n-gram Jaccard against any eval pair exceeds ``threshold``.

    Each removal names the eval instance and field with the highest score.
    Eval items are indexed by n-gram so only candidates sharing a gram are scored.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    indexes = {}
    sets = {}
    for fname, pos in (("question", 0), ("sql", 1)):
        grams = [ngram_set(pair[pos], n) for pair in eval_set]
        inverted: dict[tuple, list[int]] = {}
        for i, gs in enumerate(grams):
            for g in gs:
                inverted.setdefault(g, []).append(i)
        indexes[fname] = inverted
        sets[fname] = grams

    kept, removed = [], []
    for t in corpus:
        best: Removal | None = None
        for fname, text in (("question", t.question), ("sql", t.sql)):
            mine = ngram_set(text, n)
            candidates = sorted({i for g in mine for i in indexes[fname].get(g, ())})
            for i in candidates:
                score = jaccard(mine, sets[fname][i])
                if score > threshold and (best is None or score > best.score):
                    best = Removal(t.sample_id, i, fname, score)
        if best is None:
            kept.append(t)
        else:
            removed.append(best)
    return kept, removed


def load_eval_set(path: str | Path) -> list[tuple[str, str]]:
    """Read (question, sql) pairs from JSONL or a JSON list.

    Accepts ``question``/``sql``, ``question``/``query`` or ``question``/``answer`` keys.
    """
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    rows = json.loads(text) if stripped.startswith("[") else [json.loads(l) for l in text.splitlines() if l.strip()]
    out = []
    for r in rows:
        sql = r.get("sql") or r.get("query") or r.get("SQL") or r.get("answer") or ""
        out.append((r.get("question", ""), sql))
    return out


# -- report -------------------------------------------------------------------------

@dataclass
class CorpusReport:
    n_samples: int
    ser: float
    n_executable: int
    sa: float | None
    sa_subset_size: int
    complexity_histogram: dict[str, int]
    n_parseable: int
    mean_l2: float | None
    one_nn: float | None
    filter_params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
        rows = [
            ("samples", self.n_samples),
            ("SER", self.ser),
            ("executable", self.n_executable),
            ("SA", self.sa),
            ("SA subset size", self.sa_subset_size),
            ("parseable", self.n_parseable),
            *[(f"complexity {k}", v) for k, v in self.complexity_histogram.items()],
            ("mean L2", self.mean_l2),
            ("1-NN", self.one_nn),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {fmt(v)}" for k, v in rows)


def complexity_histogram(corpus: Sequence, schema: DatabaseSchema | None = None) -> dict[str, int]:
    hist = {"L1": 0, "L2": 0, "L3": 0, "L4": 0}
    for item in corpus:
        try:
            level = classify_sql(_sql_of(item), schema).level
        except (SqlParseError, UnsupportedDialect):
            continue
        hist[str(level)] += 1
    return hist


def evaluate_corpus(
    corpus: Sequence[Triple],
    db_path: str | Path,
    schema: DatabaseSchema,
    gateway: Gateway | None = None,
    embedder: Callable[[list[str]], np.ndarray] | None = None,
    timeout: float = 5.0,
) -> CorpusReport:
    if not corpus:
        raise ValueError("cannot evaluate an empty corpus")
    flags = executability(corpus, db_path, timeout)
    sa = judge_sa(corpus, schema, gateway, flags) if gateway is not None else SAResult(None, 0)
    hist = complexity_histogram(corpus, schema)
    try:
        mean_l2, one_nn = diversity(corpus, embedder)
    except TooFewSamples:
        mean_l2 = one_nn = None
    return CorpusReport(
        n_samples=len(corpus),
        ser=sum(flags) / len(flags),
        n_executable=sum(flags),
        sa=sa.sa,
        sa_subset_size=sa.subset_size,
        complexity_histogram=hist,
        n_parseable=sum(hist.values()),
        mean_l2=mean_l2,
        one_nn=one_nn,
    )
