import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL_SCHEMA, make_kg, make_pair
from vulnalign.kg import (
    ConfigError,
    KGError,
    KGPair,
    KnowledgeGraph,
    ParseError,
    SchemaError,
    default_schema,
    load_kg,
    normalize_text,
    partition_relations,
    save_kg,
)


def test_load_three_line_file(tmp_path, small_schema):
    p = tmp_path / "t.tsv"
    p.write_text("v1\thasVendor\tsiemens\nv1\thasProduct\tsinema\n\n")
    kg = load_kg(p, small_schema)
    assert len(kg.nodes) == 3
    assert len(kg.triples) == 2
    assert kg.node_kind["v1"] == "entity"
    assert kg.literal_text["siemens"] == "siemens"


def test_load_empty_file(tmp_path, small_schema):
    p = tmp_path / "t.tsv"
    p.write_text("")
    kg = load_kg(p, small_schema)
    assert len(kg.nodes) == 0 and len(kg.triples) == 0


def test_load_short_line_names_line(tmp_path, small_schema):
    p = tmp_path / "t.tsv"
    p.write_text("v1\thasVendor\tabb\nv2\thasVendor\n")
    with pytest.raises(ParseError) as err:
        load_kg(p, small_schema)
    assert err.value.lineno == 2
    assert ":2:" in str(err.value) or "line 2" in str(err.value)


def test_load_unknown_relation(tmp_path, small_schema):
    p = tmp_path / "t.tsv"
    p.write_text("v1\thasColour\tred\n")
    with pytest.raises(SchemaError):
        load_kg(p, small_schema)


def test_literal_head_rejected():
    kinds = {"v1": "entity", "abb": "literal", "x": "literal"}
    with pytest.raises(KGError):
        KnowledgeGraph({n: "T" for n in kinds}, kinds, {"abb": "abb", "x": "x"},
                       [("v1", "hasVendor", "abb"), ("abb", "hasProduct", "x")], RELS)


def test_normalize_text():
    assert normalize_text("  Siemens   SIMATIC\tS7 ") == "siemens simatic s7"


def test_cross_degree_one_to_one():
    pair = make_pair([("a", "hasVendor", "abb")], [("x", "hasVendor", "abb")])
    assert pair.cross_degree("abb") == (1, 1)


def test_cross_degree_without_counterpart():
    pair = make_pair([("a", "hasVendor", "abb"), ("b", "hasVendor", "abb")], [("x", "hasVendor", "ge")])
    assert pair.cross_degree("abb") == (2, 0)


def test_cross_degree_hand_built_fixture():
    src = [(f"s{k}", "hasProduct", "scada") for k in range(5)]
    tgt = [(f"t{k}", "hasProduct", "scada") for k in range(7)]
    pair = make_pair(src, tgt)
    # count adjacency by brute force
    d = sum(1 for h, _, t in pair.source.triples if t == "scada")
    dp = sum(1 for h, _, t in pair.target.triples if t == "scada")
    assert (d, dp) == (5, 7)
    assert pair.cross_degree("scada") == (5, 7)


def test_cross_degree_unknown_node():
    pair = make_pair([("a", "hasVendor", "abb")], [("x", "hasVendor", "abb")])
    with pytest.raises(KeyError):
        pair.cross_degree("nope")


def test_candidate_set_no_overlap():
    pair = make_pair([("a", "hasVendor", "abb")], [("x", "hasVendor", "ge")])
    assert pair.candidate_set("a") == set()


def test_candidate_set_copy_contains_copy():
    triples = [("a", "hasVendor", "abb"), ("a", "hasCWE", "cwe-79"), ("b", "hasVendor", "ge")]
    pair = make_pair(triples, triples)
    assert "a" in pair.candidate_set("a")
    assert "b" in pair.candidate_set("b")


def test_candidate_set_shared_vendor():
    src = [("i", "hasVendor", "siemens"), ("i", "hasCWE", "cwe-20")]
    tgt = [
        ("a", "hasVendor", "siemens"), ("b", "hasVendor", "siemens"),
        ("c", "hasVendor", "abb"), ("d", "hasVersion", "cwe-20"),
    ]
    pair = make_pair(src, tgt)
    assert pair.candidate_set("i") == {"a", "b"}


def test_candidates_require_same_relation():
    # the same text under another relation also has another literal type
    pair = make_pair([("i", "hasVendor", "siemens")], [("a", "hasProduct", "siemens")])
    assert pair.candidate_set("i") == set()


def test_partition_half():
    rels = [(f"has{k}", k < 5) for k in range(10)]
    assert partition_relations(rels).rho == 0.5


def test_default_schema_rho():
    cert = default_schema("cert")
    assert len(cert.relations) == 10
    assert cert.rho == 0.4


def test_all_profiling_rejects_epsilon():
    part = partition_relations([("hasVendor", True), ("hasProduct", True)])
    assert part.rho == 1.0
    with pytest.raises(ConfigError):
        part.check_epsilon(0.1)


def test_partition_duplicate_and_missing():
    with pytest.raises(ConfigError):
        partition_relations([("hasVendor", True), ("hasVendor", False)])
    with pytest.raises(ConfigError):
        partition_relations("relation hasVendor\n")
    with pytest.raises(ConfigError):
        partition_relations("# nothing\n")


def test_schema_text_roundtrip(small_schema):
    again = partition_relations(small_schema.to_config())
    assert again.relations == small_schema.relations
    assert again.profiling == small_schema.profiling
    assert again.profiling | again.non_profiling == set(again.relations)
    assert not again.profiling & again.non_profiling


def test_shared_literals_exact():
    pair = make_pair(
        [("a", "hasVendor", "l1"), ("a", "hasProduct", "l2")],
        [("x", "hasVendor", "m1"), ("x", "hasProduct", "m2")],
        src_texts={"l1": "abb", "l2": "relion"},
        tgt_texts={"m1": "abb", "m2": "relion 670"},
    )
    assert dict(pair.shared_literals) == {("Vendor", "abb"): ("l1", "m1")}


# random fixtures ------------------------------------------------------------

RELS = [r for r, _ in SMALL_SCHEMA]
TEXTS = ["abb", "ge", "siemens", "rockwell"]


@st.composite
def random_pairs(draw, max_nodes=50):
    def side(prefix):
        n_ent = draw(st.integers(1, 6))
        triples = draw(st.lists(
            st.tuples(st.integers(0, n_ent - 1), st.sampled_from(RELS), st.sampled_from(TEXTS)),
            min_size=1, max_size=max_nodes // 4,
        ))
        # one literal node per (relation, text), as a loader would build
        return [(f"{prefix}{e}", r, f"{r}:{t}") for e, r, t in triples], {
            f"{r}:{t}": t for _, r, t in triples
        }

    (s, s_text), (t, t_text) = side("s"), side("t")
    return make_pair(s, t, s_text, t_text)


def brute_candidates(pair, i, side):
    g, o = pair.graph(side), pair.graph("t" if side == "s" else "s")
    found = set()
    for h, r, j in g.triples:
        if h != i:
            continue
        key = (g.node_type[j], g.literal_text[j])
        for h2, r2, j2 in o.triples:
            if r2 == r and (o.node_type[j2], o.literal_text[j2]) == key:
                found.add(h2)
    return found


@settings(max_examples=60, deadline=None)
@given(random_pairs())
def test_candidate_set_matches_brute_force(pair):
    for side in ("s", "t"):
        for e in pair.graph(side).entities():
            assert pair.candidate_set(e, side) == brute_candidates(pair, e, side)


@settings(max_examples=60, deadline=None)
@given(random_pairs())
def test_cross_degree_symmetric_under_swap(pair):
    swapped = pair.swapped()
    for s_node, t_node in pair.shared_literals.values():
        d, dp = pair.cross_degree(s_node, "s")
        assert swapped.cross_degree(t_node, "s") == (dp, d)


@settings(max_examples=60, deadline=None)
@given(random_pairs())
def test_shared_literals_are_the_common_texts(pair):
    def keys(kg):
        return {(kg.node_type[n], kg.literal_text[n]) for n in kg.literals()}

    assert set(pair.shared_literals) == keys(pair.source) & keys(pair.target)


@settings(max_examples=30, deadline=None)
@given(random_pairs())
def test_save_load_roundtrip(tmp_path_factory, pair):
    d = tmp_path_factory.mktemp("rt")
    schema = partition_relations(SMALL_SCHEMA)
    save_kg(pair.source, d / "t.tsv", d / "n.tsv")
    again = load_kg(d / "t.tsv", schema, d / "n.tsv")
    assert again.triples == pair.source.triples
    assert dict(again.literal_text) == dict(pair.source.literal_text)
    assert dict(again.node_type) == dict(pair.source.node_type)


def test_node_ids_of_triples_are_typed():
    kg = make_kg([("a", "hasVendor", "abb"), ("a", "hasCWE", "cwe-1")])
    for h, _, t in kg.triples:
        assert h in kg.node_type and t in kg.node_type


def test_entity_degree_counts_distinct_entities():
    kg = make_kg([("a", "hasVendor", "abb"), ("b", "hasVendor", "abb"), ("a", "hasProduct", "abb")])
    assert kg.entity_degree("abb") == 2
    assert np.isclose(KGPair(kg, kg).cross_degree("abb")[1], 2)
