"""Small random paired graphs for oracle comparisons and gradient checks."""

from __future__ import annotations

import numpy as np

from .features import FeatureTable
from .kg import ENTITY, LITERAL, AlignmentPair, KGPair, KnowledgeGraph, partition_relations

FIXTURE_SCHEMA = (("hasVendor", True), ("hasImpact", True), ("hasVersion", False), ("hasCWE", False))
_TEXTS = ("alpha", "beta", "gamma")


def fixture_schema():
    return partition_relations(FIXTURE_SCHEMA)


def _side(rng, prefix, n_entities, n_literals, schema):
    node_type, node_kind, text, triples = {}, {}, {}, []
    for k in range(n_entities):
        node_type[f"{prefix}e{k}"] = schema.entity_type
        node_kind[f"{prefix}e{k}"] = ENTITY
    literal_rel = {}
    for k in range(n_literals):
        r = schema.relations[int(rng.integers(len(schema.relations)))]
        lid = f"{prefix}l{k}"
        node_type[lid] = schema.tail_type(r)
        node_kind[lid] = LITERAL
        text[lid] = str(rng.choice(_TEXTS))
        literal_rel[lid] = r
    for k in range(n_entities):
        linked = [lid for lid in literal_rel if rng.random() < 0.6]
        if not linked:
            linked = [f"{prefix}l{int(rng.integers(n_literals))}"]
        triples += [(f"{prefix}e{k}", literal_rel[lid], lid) for lid in linked]
    return KnowledgeGraph(node_type, node_kind, text, triples, schema.relations)


def random_fixture(seed, feature_dim=4, max_nodes=10):
    """``(pair, schema, (src_features, tgt_features), pairs)`` with at most ``max_nodes`` nodes.

    Literal texts come from a three-word pool so the two sides share
    literals and entities have candidates.  Features are standard normal.
    """
    rng = np.random.default_rng(seed)
    schema = fixture_schema()
    per_side = max_nodes // 2
    n_ent = int(rng.integers(1, 3))
    n_lit = int(rng.integers(1, per_side - n_ent + 1))
    source = _side(rng, "s", n_ent, n_lit, schema)
    n_ent_t = int(rng.integers(1, 3))
    n_lit_t = int(rng.integers(1, per_side - n_ent_t + 1))
    target = _side(rng, "t", n_ent_t, n_lit_t, schema)
    features = []
    for g in (source, target):
        table = FeatureTable(feature_dim)
        for n in sorted(g.nodes):
            table[n] = np.zeros(feature_dim) if g.node_kind[n] == ENTITY else rng.normal(size=feature_dim)
        features.append(table)
    pairs = [
        AlignmentPair(s, t, int(rng.random() < 0.5))
        for s in sorted(source.entities()) for t in sorted(target.entities())
    ]
    if len({p.label for p in pairs}) == 1:
        p = pairs[0]
        pairs[0] = AlignmentPair(p.src, p.tgt, 1 - p.label)
    return KGPair(source, target), schema, tuple(features), pairs
