import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vulnalign.kg import ENTITY, LITERAL, KGPair, KnowledgeGraph, partition_relations  # noqa: E402

SMALL_SCHEMA = (("hasVendor", True), ("hasProduct", True), ("hasVersion", False), ("hasCWE", False))


def make_kg(triples, literal_texts=None, schema=None):
    """Graph from ``(head, relation, tail)`` triples.

    Heads are entities; tails are literals whose text defaults to their id.
    """
    schema = schema or partition_relations(SMALL_SCHEMA)
    literal_texts = literal_texts or {}
    node_type, node_kind, text = {}, {}, {}
    for h, r, t in triples:
        node_type[h], node_kind[h] = schema.entity_type, ENTITY
    for h, r, t in triples:
        if t not in node_kind:
            node_type[t], node_kind[t] = schema.tail_type(r), LITERAL
            text[t] = literal_texts.get(t, t)
    return KnowledgeGraph(node_type, node_kind, text, triples, schema.relations)


def make_pair(src_triples, tgt_triples, src_texts=None, tgt_texts=None, schema=None):
    return KGPair(make_kg(src_triples, src_texts, schema), make_kg(tgt_triples, tgt_texts, schema))


@pytest.fixture
def small_schema():
    return partition_relations(SMALL_SCHEMA)
