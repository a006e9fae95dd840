import functools
import json

import pytest
from hypothesis import given, strategies as st

from semsql.demo import DemoResponder
from semsql.errors import EmptyEvidence, MissingPriorLayer, UnknownErrorType, ValidationFailure
from semsql.kb import (
    KBStore,
    KnowledgeBase,
    EvidenceQuery,
    FieldTypeLayer,
    MetadataLayer,
    build,
    compatible_operations,
    levenshtein,
    near_names,
    retrieve,
    run_stage,
    stage_inputs,
    stage_request,
    validate_layer,
)
from semsql.llm import Gateway, RecordingProvider

from conftest import no_sleep, scripted_gateway

SCHOOL_CODES = ["01100170109835", "01316170131763", "19647331932037", "19647331995000", "37683383730959"]
ID_OPS = ["select", "filter", "group", "count"]

EXPECTED_KB = {
    "k1_metadata": {
        "tables": [
            {"table": "schools", "description": "records of schools", "row_count_estimate": 6},
            {"table": "satscores", "description": "records of satscores", "row_count_estimate": 6},
        ],
        "columns": [
            {"table": "schools", "column": "CDSCode", "description": "identifier of the schools record"},
            {"table": "schools", "column": "County", "description": "County (TEXT)"},
            {"table": "satscores", "column": "cds", "description": "identifier referencing schools(CDSCode)"},
            {"table": "satscores", "column": "sname", "description": "sname (TEXT)"},
            {"table": "satscores", "column": "AvgScrMath", "description": "AvgScrMath (INTEGER)"},
        ],
    },
    "k2_domain": {
        "domain_name": "education",
        "business_rules": [
            {"rule_id": "R1", "statement": "School codes identify schools; never average or sum them.",
             "affected_tables": ["schools", "satscores"],
             "affected_columns": ["schools.CDSCode", "satscores.cds"]},
            {"rule_id": "R2", "statement": "SAT averages are only comparable across schools with scores.",
             "affected_tables": ["satscores"], "affected_columns": ["satscores.AvgScrMath"]},
        ],
    },
    "k3_field_types": {"columns": [
        {"table": "schools", "column": "CDSCode", "semantic_category": "identifier", "unit": None,
         "value_range": None, "example_values": SCHOOL_CODES},
        {"table": "schools", "column": "County", "semantic_category": "categorical", "unit": None,
         "value_range": None, "example_values": ["Alameda", "Los Angeles", "San Diego", "Santa Clara"]},
        {"table": "satscores", "column": "cds", "semantic_category": "identifier", "unit": None,
         "value_range": None, "example_values": SCHOOL_CODES},
        {"table": "satscores", "column": "sname", "semantic_category": "free_text", "unit": None,
         "value_range": None,
         "example_values": ["Envision Academy", "FAME Public Charter", "Garfield High", "Lincoln High",
                            "Lynbrook High"]},
        {"table": "satscores", "column": "AvgScrMath", "semantic_category": "quantitative", "unit": "points",
         "value_range": [389, 684], "example_values": [389, 418, 435, 512, 547]},
    ]},
    "k4_columns": {"columns": [
        {"table": "schools", "column": "CDSCode", "meaning": "identifier attribute CDSCode",
         "allowed_operations": ID_OPS, "nullability": "NULL means unknown"},
        {"table": "schools", "column": "County", "meaning": "categorical attribute County",
         "allowed_operations": ["select", "filter", "group", "order", "count"],
         "nullability": "NULL means unknown"},
        {"table": "satscores", "column": "cds", "meaning": "identifier attribute cds",
         "allowed_operations": ID_OPS, "nullability": "NULL means unknown"},
        {"table": "satscores", "column": "sname", "meaning": "free_text attribute sname",
         "allowed_operations": ["select", "filter", "order", "count"], "nullability": "NULL means unknown"},
        {"table": "satscores", "column": "AvgScrMath", "meaning": "quantitative attribute AvgScrMath",
         "allowed_operations": ["select", "filter", "order", "sum", "avg", "min", "max", "count"],
         "nullability": "NULL means unknown"},
    ]},
    "k5_tables": {"tables": [
        {"table": "schools", "role": "primary_entity", "constraints": []},
        {"table": "satscores", "role": "domain_attribute",
         "constraints": [{"statement": "AvgScrMath is non-negative", "columns": ["AvgScrMath"]}]},
    ]},
    "k6_relations": {
        "join_edges": [
            {"from_table": "satscores", "from_column": "cds", "to_table": "schools", "to_column": "CDSCode",
             "cardinality": "1:N", "label": "foreign key", "inferred": False},
        ],
        "derived_dependencies": [
            {"statement": "every score row belongs to one school", "tables": ["satscores", "schools"]},
        ],
    },
}


def test_build_equals_hand_authored_kb(kb):
    assert kb.complete
    assert kb.content_dict() == EXPECTED_KB


def test_provenance_filled(kb):
    assert sorted(kb.provenance) == [1, 2, 3, 4, 5, 6]
    assert all(p.model_id == "scripted" and len(p.prompt_fingerprint) == 64 for p in kb.provenance.values())


def test_rebuild_is_identical(kb, kb_script, schema, sample):
    again = build(schema, sample, scripted_gateway(kb_script))
    assert again.fingerprint() == kb.fingerprint()


def test_cdscode_is_identifier(kb):
    assert kb.field_type("schools", "CDSCode").semantic_category == "identifier"


def test_fk_in_k6_not_inferred(kb):
    edges = [e for e in kb.k6_relations.join_edges if e.connects(("satscores", "cds"), ("schools", "CDSCode"))]
    assert len(edges) == 1 and edges[0].inferred is False


def test_stage4_without_k3_raises(kb, schema, sample):
    only_k1 = KnowledgeBase().with_layer(1, kb.k1_metadata)
    with pytest.raises(MissingPriorLayer):
        stage_inputs(4, schema, sample, only_k1)
    with pytest.raises(MissingPriorLayer):
        run_stage(4, schema, sample, only_k1, Gateway(RecordingProvider(DemoResponder())))


def test_stage_inputs_follow_table(kb, schema, sample):
    expected_keys = {
        1: {"schema_ddl", "sample_rows"},
        2: {"schema_ddl", "k1_metadata"},
        3: {"k1_metadata", "sample_rows"},
        4: {"k1_metadata", "k2_domain", "k3_field_types"},
        5: {"k1_metadata", "k2_domain", "k3_field_types", "k4_columns"},
        6: {"k3_field_types", "k4_columns", "k5_tables", "foreign_keys"},
    }
    for t, keys in expected_keys.items():
        assert set(stage_inputs(t, schema, sample, kb)) == keys


def _poison(layer):
    text = layer.model_dump_json().replace("schools", "poison").replace("satscores", "poison2")
    return type(layer).model_validate_json(text)


@pytest.mark.parametrize("t", range(1, 7))
def test_future_layers_are_ignored(kb, schema, sample, t):
    # give the stage corrupted copies of every layer it must not read
    clean = KnowledgeBase()
    for i in range(1, t):
        clean = clean.with_layer(i, kb.layer(i))
    poisoned = clean
    for i in range(t, 7):
        poisoned = poisoned.with_layer(i, _poison(kb.layer(i)))
        assert poisoned.layer(i) != kb.layer(i)
    a = stage_request(t, stage_inputs(t, schema, sample, clean)).fingerprint()
    b = stage_request(t, stage_inputs(t, schema, sample, poisoned)).fingerprint()
    assert a == b


def test_referential_closure(kb):
    universe = {(t.lower(), c.lower()) for t, c in kb.column_universe()}
    tables = {t.lower() for t in kb.table_names()}
    mentioned = set()
    for r in kb.k2_domain.business_rules:
        mentioned |= {tuple(x.lower().split(".")) for x in r.affected_columns}
        assert {t.lower() for t in r.affected_tables} <= tables
    for layer in (kb.k3_field_types, kb.k4_columns):
        mentioned |= {(c.table.lower(), c.column.lower()) for c in layer.columns}
    for tr in kb.k5_tables.tables:
        mentioned |= {(tr.table.lower(), c.lower()) for con in tr.constraints for c in con.columns}
    for e in kb.k6_relations.join_edges:
        mentioned |= {(e.from_table.lower(), e.from_column.lower()), (e.to_table.lower(), e.to_column.lower())}
    assert mentioned <= universe


def test_k4_ops_compatible_with_k3(kb):
    for cs in kb.k4_columns.columns:
        cat = kb.field_type(cs.table, cs.column).semantic_category
        assert set(cs.allowed_operations) <= compatible_operations(cat)


# -- validation and repair ---------------------------------------------------

class _Override(DemoResponder):
    def __init__(self, stage, fn):
        super().__init__()
        self._stage_no, self._fn = stage, fn

    def __call__(self, request):
        if request.system_text.startswith(f"[kb_stage_{self._stage_no}]"):
            payload = json.loads(request.user_text.partition("INPUT\n")[2])
            return json.dumps(self._fn(getattr(DemoResponder, f"_stage{self._stage_no}")(self, payload)))
        return super().__call__(request)


def _build_with(stage, fn, schema, sample, store=None):
    return build(schema, sample, Gateway(RecordingProvider(_Override(stage, fn)), sleep=no_sleep), store)


def test_bad_role_names_table(schema, sample):
    def bad(out):
        out["tables"][1]["role"] = "overlord"
        return out
    with pytest.raises(ValidationFailure, match="satscores"):
        _build_with(5, bad, schema, sample)


def test_unknown_category_rejected(schema, sample):
    def bad(out):
        out["columns"][0]["semantic_category"] = "vibes"
        return out
    with pytest.raises(ValidationFailure, match="CDSCode"):
        _build_with(3, bad, schema, sample)


def test_bad_cardinality_rejected(schema, sample):
    def bad(out):
        out["join_edges"] = [{"from_table": "satscores", "from_column": "sname", "to_table": "schools",
                              "to_column": "County", "cardinality": "many-ish", "label": "x"}]
        return out
    with pytest.raises(ValidationFailure):
        _build_with(6, bad, schema, sample)


def test_duplicate_rule_ids_rejected(schema, sample):
    def bad(out):
        out["business_rules"].append(dict(out["business_rules"][0]))
        return out
    with pytest.raises(ValidationFailure, match="R1"):
        _build_with(2, bad, schema, sample)


def test_stage1_drops_unknown_and_fills_missing(schema, sample):
    def messy(out):
        out["tables"].append({"table": "teachers", "description": "ghost"})
        out["columns"] = [c for c in out["columns"] if c["column"] != "County"]
        out["columns"].append({"table": "satscores", "column": "ghost", "description": "?"})
        return out
    kb = _build_with(1, messy, schema, sample)
    assert kb.table_names() == ["schools", "satscores"]
    assert kb.column_meta("schools", "County").description == ""
    assert kb.column_meta("satscores", "ghost") is None


def test_stage4_drops_incompatible_ops(schema, sample):
    def greedy(out):
        for c in out["columns"]:
            c["allowed_operations"] = ["SUM", "average", "select", "teleport"]
        return out
    kb = _build_with(4, greedy, schema, sample)
    assert kb.column_semantics("schools", "CDSCode").allowed_operations == ["select"]
    assert kb.column_semantics("satscores", "AvgScrMath").allowed_operations == ["select", "sum", "avg"]


def test_stage6_llm_edge_flagged_inferred(schema, sample):
    def extra(out):
        out["join_edges"] = [
            {"from_table": "schools", "from_column": "CDSCode", "to_table": "satscores", "to_column": "cds",
             "cardinality": "one-to-many", "label": "school has scores"},
            {"from_table": "satscores", "from_column": "sname", "to_table": "schools", "to_column": "County",
             "cardinality": "N:M", "label": "speculative"},
        ]
        return out
    kb = _build_with(6, extra, schema, sample)
    edges = {(e.from_column, e.to_column): e for e in kb.k6_relations.join_edges}
    assert len(edges) == 2
    fk = edges[("cds", "CDSCode")]  # reoriented to the declared direction
    assert fk.inferred is False and fk.cardinality == "1:N" and fk.label == "school has scores"
    assert edges[("sname", "County")].inferred is True


def test_k3_value_range_stripped_for_categorical(schema, sample):
    def ranged(out):
        for c in out["columns"]:
            c["value_range"] = [0, 1]
            c["example_values"] = list(range(9))
        return out
    kb = _build_with(3, ranged, schema, sample)
    assert kb.field_type("schools", "County").value_range is None
    assert kb.field_type("satscores", "AvgScrMath").value_range == [0, 1]
    assert all(len(c.example_values) == 5 for c in kb.k3_field_types.columns)


# -- persistence and resume ------------------------------------------------------

class _Counting:
    model_id = "counting"

    def __init__(self, fail_stage=None):
        self.inner = RecordingProvider(DemoResponder())
        self.stages = []
        self.fail_stage = fail_stage

    def send(self, request):
        tag = request.system_text.split("]")[0].lstrip("[")
        self.stages.append(tag)
        if tag == f"kb_stage_{self.fail_stage}":
            raise ValidationFailure("injected")
        return self.inner.send(request)


def test_partial_build_persists_and_resumes(tmp_path, schema, sample, kb):
    store = KBStore(tmp_path / "kb")
    first = _Counting(fail_stage=6)
    with pytest.raises(ValidationFailure):
        build(schema, sample, Gateway(first), store)
    assert sorted(store.manifest()["stages"]) == ["1", "2", "3", "4", "5"]
    assert not store.manifest()["complete"]

    second = _Counting()
    resumed = build(schema, sample, Gateway(second), store)
    assert second.stages == ["kb_stage_6"]
    assert resumed.fingerprint() == kb.fingerprint()
    assert store.load().complete and store.load().fingerprint() == kb.fingerprint()
    assert {p.name for p in (tmp_path / "kb").iterdir()} == {
        "manifest.json", "k1_metadata.json", "k2_domain.json", "k3_field_types.json",
        "k4_columns.json", "k5_tables.json", "k6_relations.json"}


def test_save_layer_invalidates_later_stages(tmp_path, schema, sample, kb):
    store = KBStore(tmp_path / "kb")
    build(schema, sample, Gateway(_Counting()), store)
    store.save_layer(3, kb.k3_field_types, kb.provenance[3])
    assert sorted(store.manifest()["stages"]) == ["1", "2", "3"]
    assert not store.load().complete


# -- retrieval ---------------------------------------------------------------------

def test_retrieve_aggregation_evidence(kb):
    ev = retrieve(kb, EvidenceQuery("aggregation_type_mismatch", table="schools", column="CDSCode"))
    layers = {e.layer: e for e in ev.entries}
    assert "identifier" in layers["K3"].statement
    assert "allowed_operations=select,filter,group,count" in layers["K4"].statement


def test_retrieve_join_single_edge(kb):
    ev = retrieve(kb, EvidenceQuery("invalid_join", tables=("schools", "satscores")))
    assert [(e.layer, e.key) for e in ev.entries] == [("K6", "satscores.cds->schools.CDSCode")]


@functools.lru_cache(maxsize=None)
def _edit_oracle(a: str, b: str) -> int:
    if not a or not b:
        return len(a) + len(b)
    return min(_edit_oracle(a[1:], b) + 1, _edit_oracle(a, b[1:]) + 1,
               _edit_oracle(a[1:], b[1:]) + (a[0] != b[0]))


def test_retrieve_invalid_column_candidates(kb):
    ev = retrieve(kb, EvidenceQuery("invalid_column", table="satscores", column="AvgScrMth"))
    keys = [e.key for e in ev.entries if e.layer == "K1"]
    ranked = sorted(kb.columns_of("satscores"), key=lambda c: (_edit_oracle("avgscrmth", c.lower()), c.lower()))
    assert keys[0] == f"satscores.{ranked[0]}" == "satscores.AvgScrMath"
    assert _edit_oracle("AvgScrMth", "AvgScrMath") == 1
    assert {e.layer for e in ev.entries} == {"K1", "K4"}


def test_retrieve_errors(kb):
    with pytest.raises(UnknownErrorType):
        retrieve(kb, EvidenceQuery("cosmic_ray", table="schools"))
    with pytest.raises(EmptyEvidence):
        retrieve(kb, EvidenceQuery("invalid_column", table="schools", column="zzzzzzzzzz"))


@pytest.mark.parametrize("query", [
    EvidenceQuery("invalid_column", table="satscores", column="snam"),
    EvidenceQuery("invalid_table", table="school"),
    EvidenceQuery("join_inconsistency", tables=("satscores",)),
    EvidenceQuery("aggregation_type_mismatch", table="satscores", column="AvgScrMath"),
    EvidenceQuery("trace_sql_divergence", tables=("schools", "satscores")),
    EvidenceQuery("not_executable", tables=("schools",)),
])
def test_retrieve_is_pure_and_relevant(kb, query):
    a, b = retrieve(kb, query), retrieve(kb, query)
    assert a == b and a.entries
    named = {n.lower() for n in (query.table, query.column, *query.tables) if n}
    for e in a.entries:
        text = (e.key + " " + e.statement).lower()
        # near-name candidates are related to the query by construction; check the table or name
        assert any(n in text or any(levenshtein(n, part) <= 2 for part in text.replace(".", " ").split())
                   for n in named)


@given(st.text(alphabet="abcxyz", max_size=7), st.text(alphabet="abcxyz", max_size=7))
def test_levenshtein_matches_recursive_oracle(a, b):
    assert levenshtein(a, b) == _edit_oracle(a, b)


@given(st.text(alphabet="abcde", min_size=1, max_size=6),
       st.lists(st.text(alphabet="abcde", min_size=1, max_size=6), unique=True, max_size=12))
def test_near_names_contract(name, pool):
    got = near_names(name, pool)
    assert len(got) <= 5 and len(set(got)) == len(got) and set(got) <= set(pool)
    for cand in got:
        close = _edit_oracle(name.lower(), cand.lower()) <= 2
        prefix = len(name) >= 3 and len(cand) >= 3 and (
            cand.lower().startswith(name.lower()) or name.lower().startswith(cand.lower()))
        assert close or prefix
    within = sorted((p for p in pool if _edit_oracle(name.lower(), p.lower()) <= 2),
                    key=lambda p: (_edit_oracle(name.lower(), p.lower()), p.lower()))
    assert got[:len(within)] == within[:5]
