"""Typed heterogeneous knowledge graphs and the cross-graph index built on them.

A graph holds entity nodes (vulnerabilities, intermediate records) and literal
nodes (artifact text such as a vendor name).  Two graphs that share a schema
form a :class:`KGPair`; literal identity across the pair is exact equality of
node type and normalised text.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

ENTITY = "entity"
LITERAL = "literal"

#: Artifacts required or encouraged when requesting a vulnerability identifier.
PROFILING_RELATIONS = frozenset(
    {"hasWeakness", "hasVendor", "hasProduct", "hasImpact", "hasDiscoverer"}
)

# relation -> literal type of its tail
_ARTIFACT_TYPES = {
    "hasWeakness": "Weakness",
    "hasCWE": "CWE",
    "hasCVSSv2Vector": "CVSSv2Vector",
    "hasCVSSv3Vector": "CVSSv3Vector",
    "hasCVSSv2Score": "CVSSv2Score",
    "hasCVSSv3Score": "CVSSv3Score",
    "hasVendor": "Vendor",
    "hasProduct": "Product",
    "hasVersion": "Version",
    "hasImpact": "Impact",
    "hasDiscoverer": "Discoverer",
}

# Relation sets shared between each source repository and NVD.
_SCHEMA_RELATIONS = {
    "cert": (
        "hasWeakness", "hasCWE", "hasCVSSv2Vector", "hasCVSSv3Vector", "hasCVSSv2Score",
        "hasCVSSv3Score", "hasVendor", "hasProduct", "hasVersion", "hasImpact",
    ),
    "sf": ("hasWeakness", "hasVendor", "hasProduct", "hasVersion", "hasImpact"),
    "full": tuple(_ARTIFACT_TYPES),
}

_WS = re.compile(r"\s+")


class KGError(Exception):
    """Base class for graph loading and lookup failures."""


class ParseError(KGError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class SchemaError(KGError):
    pass


class ConfigError(KGError):
    pass


def normalize_text(text):
    """Lowercase, trim, and collapse internal whitespace."""
    return _WS.sub(" ", text.strip().lower())


@dataclass(frozen=True)
class RelationPartition:
    """The schema: ordered relations, their tail types, and the profiling split."""

    relations: tuple
    profiling: frozenset
    tail_types: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    entity_type: str = "Vulnerability"

    def __post_init__(self):
        if len(set(self.relations)) != len(self.relations):
            raise ConfigError("duplicate relation in schema")
        unknown = set(self.profiling) - set(self.relations)
        if unknown:
            raise ConfigError(f"profiling relations not in schema: {sorted(unknown)}")
        object.__setattr__(self, "profiling", frozenset(self.profiling))
        object.__setattr__(self, "tail_types", MappingProxyType(dict(self.tail_types)))

    @property
    def non_profiling(self):
        return frozenset(r for r in self.relations if r not in self.profiling)

    @property
    def rho(self):
        return len(self.profiling) / len(self.relations)

    def index(self, relation):
        return self.relations.index(relation)

    def is_profiling(self, relation):
        return relation in self.profiling

    def tail_type(self, relation):
        return self.tail_types.get(relation, relation[3:] if relation.startswith("has") else relation)

    def restrict(self, relations):
        """Sub-schema keeping only ``relations`` (in schema order)."""
        keep = tuple(r for r in self.relations if r in set(relations))
        return RelationPartition(
            keep,
            frozenset(r for r in self.profiling if r in keep),
            {r: self.tail_type(r) for r in keep},
            self.entity_type,
        )

    def check_epsilon(self, epsilon):
        if not 0.0 < epsilon < 1.0 - self.rho:
            raise ConfigError(
                f"epsilon={epsilon!r} outside (0, 1 - rho) = (0, {1.0 - self.rho!r})"
            )

    def to_config(self):
        lines = [f"entity_type {self.entity_type}"]
        for r in self.relations:
            flag = "true" if r in self.profiling else "false"
            lines.append(f"relation {r} profiling={flag} tail={self.tail_type(r)}")
        return "\n".join(lines) + "\n"


def partition_relations(config):
    """Build a :class:`RelationPartition` from a schema config.

    ``config`` is either the text of a schema file, a path to one, or an
    iterable of ``(relation, is_profiling)`` pairs.  Every relation must be
    listed exactly once with an explicit profiling flag.
    """
    if isinstance(config, Path) or (isinstance(config, str) and "\n" not in config and Path(config).is_file()):
        config = Path(config).read_text(encoding="utf-8")
    if isinstance(config, str):
        return _parse_schema_text(config)
    relations, profiling = [], set()
    for name, flag in config:
        if name in relations:
            raise ConfigError(f"duplicate relation {name!r}")
        relations.append(name)
        if flag:
            profiling.add(name)
    if not relations:
        raise ConfigError("schema lists no relations")
    return RelationPartition(
        tuple(relations), frozenset(profiling), {r: _ARTIFACT_TYPES.get(r, r[3:]) for r in relations}
    )


def _parse_schema_text(text):
    relations, profiling, tails = [], set(), {}
    entity_type = "Vulnerability"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "entity_type" and len(parts) == 2:
            entity_type = parts[1]
            continue
        if parts[0] != "relation" or len(parts) < 3:
            raise ConfigError(f"schema line {lineno}: expected 'relation <name> profiling=<bool>'")
        name = parts[1]
        opts = dict(p.split("=", 1) for p in parts[2:] if "=" in p)
        if "profiling" not in opts:
            raise ConfigError(f"schema line {lineno}: relation {name!r} missing profiling flag")
        if name in relations:
            raise ConfigError(f"schema line {lineno}: duplicate relation {name!r}")
        flag = opts["profiling"].lower()
        if flag not in ("true", "false"):
            raise ConfigError(f"schema line {lineno}: profiling must be true/false, got {flag!r}")
        relations.append(name)
        if flag == "true":
            profiling.add(name)
        tails[name] = opts.get("tail", _ARTIFACT_TYPES.get(name, name[3:]))
    if not relations:
        raise ConfigError("schema lists no relations")
    return RelationPartition(tuple(relations), frozenset(profiling), tails, entity_type)


def default_schema(style="cert"):
    """Vulnerability schema restricted to the artifacts a source shares with NVD.

    ``"cert"`` (10 relations, rho 0.4) and ``"sf"`` (5 relations, rho 0.8)
    mirror the two alignment datasets; ``"full"`` adds the discoverer.
    """
    try:
        rels = _SCHEMA_RELATIONS[style]
    except KeyError:
        raise ConfigError(f"unknown schema style {style!r}") from None
    return partition_relations([(r, r in PROFILING_RELATIONS) for r in rels])


class KnowledgeGraph:
    """Immutable typed multigraph of ``(head, relation, tail)`` triples."""

    def __init__(self, node_type, node_kind, literal_text, triples, relations):
        self.node_type = MappingProxyType(dict(node_type))
        self.node_kind = MappingProxyType(dict(node_kind))
        self.literal_text = MappingProxyType(dict(literal_text))
        self.triples = frozenset(triples)
        self.relations = tuple(relations)
        self.nodes = frozenset(self.node_type)
        for h, r, t in self.triples:
            if h not in self.nodes or t not in self.nodes:
                raise KGError(f"triple ({h}, {r}, {t}) references an undeclared node")
            if self.node_kind[h] == LITERAL:
                raise KGError(f"literal node {h!r} cannot be a triple head")
        out = defaultdict(lambda: defaultdict(set))
        into = defaultdict(set)
        for h, r, t in sorted(self.triples):
            out[h][r].add(t)
            into[t].add(h)
        self._out = {h: {r: frozenset(ts) for r, ts in rs.items()} for h, rs in out.items()}
        self._into = {t: frozenset(hs) for t, hs in into.items()}

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"KnowledgeGraph(nodes={len(self.nodes)}, triples={len(self.triples)})"

    def neighbors(self, node, relation):
        """``N_{i,r}``: tails reached from ``node`` through ``relation``."""
        return self._out.get(node, {}).get(relation, frozenset())

    def out_relations(self, node):
        return self._out.get(node, {})

    def heads_of(self, node):
        return self._into.get(node, frozenset())

    def entities(self, node_type=None):
        return sorted(
            n for n, k in self.node_kind.items()
            if k == ENTITY and (node_type is None or self.node_type[n] == node_type)
        )

    def literals(self):
        return sorted(n for n, k in self.node_kind.items() if k == LITERAL)

    def entity_degree(self, node):
        """Distinct entity nodes adjacent to ``node`` in either direction."""
        adjacent = set(self._into.get(node, ()))
        for tails in self._out.get(node, {}).values():
            adjacent.update(tails)
        return sum(1 for n in adjacent if self.node_kind[n] == ENTITY)

    def restrict(self, relations):
        """Copy keeping only triples whose relation is in ``relations``."""
        keep = set(relations)
        return KnowledgeGraph(
            self.node_type, self.node_kind, self.literal_text,
            [t for t in self.triples if t[1] in keep],
            [r for r in self.relations if r in keep],
        )


class KGPair:
    """Source graph ``G`` and target graph ``G'`` over one schema."""

    def __init__(self, source, target):
        self.source = source
        self.target = target
        src_index = _literal_index(source)
        tgt_index = _literal_index(target)
        shared = sorted(set(src_index) & set(tgt_index))
        self.shared_literals = MappingProxyType({k: (src_index[k], tgt_index[k]) for k in shared})
        # Literal nodes repeating a value all map to the first node carrying
        # that value on the other side.
        self._counterpart = {}
        for side, g, other_index in (("s", source, tgt_index), ("t", target, src_index)):
            for n in g.literals():
                cp = other_index.get((g.node_type[n], g.literal_text[n]))
                if cp is not None:
                    self._counterpart[(side, n)] = cp
        self._candidates = None

    def swapped(self):
        return KGPair(self.target, self.source)

    def graph(self, side):
        return self.source if side == "s" else self.target

    def counterpart(self, node, side="s"):
        """Node in the other graph carrying the same literal, or ``None``."""
        return self._counterpart.get((side, node))

    def cross_degree(self, j, side="s"):
        """``(d_j, d'_j)``: entity degree of literal ``j`` here and of its counterpart."""
        g = self.graph(side)
        if j not in g.nodes:
            raise KeyError(f"node {j!r} not in the {'source' if side == 's' else 'target'} graph")
        other = self.graph("t" if side == "s" else "s")
        cp = self.counterpart(j, side)
        return g.entity_degree(j), (other.entity_degree(cp) if cp is not None else 0)

    def candidate_set(self, i, side="s"):
        """``C_i``: entities of the other graph sharing a literal with ``i`` under one relation."""
        g = self.graph(side)
        if i not in g.nodes:
            raise KeyError(f"node {i!r} not in graph")
        other = self.graph("t" if side == "s" else "s")
        found = set()
        for r, tails in g.out_relations(i).items():
            for j in tails:
                cp = self.counterpart(j, side)
                if cp is None:
                    continue
                for h in other.heads_of(cp):
                    if cp in other.neighbors(h, r):
                        found.add(h)
        return found

    def all_candidates(self):
        """``{("s", i): C_i, ("t", i'): C_i'}`` for every entity on both sides, cached."""
        if self._candidates is None:
            out = {}
            for side in ("s", "t"):
                g = self.graph(side)
                for e in g.entities():
                    out[(side, e)] = frozenset(self.candidate_set(e, side))
            self._candidates = out
        return self._candidates


def _literal_index(kg):
    index = {}
    for n in kg.literals():
        key = (kg.node_type[n], kg.literal_text[n])
        index.setdefault(key, n)
    return index


# file formats ---------------------------------------------------------------


def _read_rows(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_kg(path, schema, nodes_path=None):
    """Load a graph from a tab-separated triple file (and optional node file).

    Undeclared heads become entities of ``schema.entity_type``; undeclared
    tails become literals typed by their relation, with the id as text.
    """
    path = Path(path)
    node_type, node_kind, text = {}, {}, {}
    if nodes_path is not None:
        for lineno, fields in _read_rows(nodes_path):
            if len(fields) not in (3, 4):
                raise ParseError(nodes_path, lineno, f"expected 4 fields, got {len(fields)}")
            nid, ntype, kind = fields[:3]
            if kind not in (ENTITY, LITERAL):
                raise ParseError(nodes_path, lineno, f"kind must be entity|literal, got {kind!r}")
            node_type[nid] = ntype
            node_kind[nid] = kind
            if kind == LITERAL:
                text[nid] = normalize_text(fields[3] if len(fields) == 4 else nid)
    triples = []
    allowed = set(schema.relations)
    for lineno, fields in _read_rows(path):
        if len(fields) != 3:
            raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
        h, r, t = fields
        if r not in allowed:
            raise SchemaError(f"{path}:{lineno}: relation {r!r} not in schema")
        if h not in node_type:
            node_type[h], node_kind[h] = schema.entity_type, ENTITY
        if t not in node_type:
            node_type[t], node_kind[t] = schema.tail_type(r), LITERAL
            text[t] = normalize_text(t)
        triples.append((h, r, t))
    return KnowledgeGraph(node_type, node_kind, text, triples, schema.relations)


def save_kg(kg, triples_path, nodes_path=None):
    """Write the triple file (and node file) in sorted, reproducible order."""
    with open(triples_path, "w", encoding="utf-8") as fh:
        for h, r, t in sorted(kg.triples):
            fh.write(f"{h}\t{r}\t{t}\n")
    if nodes_path is not None:
        with open(nodes_path, "w", encoding="utf-8") as fh:
            for n in sorted(kg.nodes):
                fh.write(f"{n}\t{kg.node_type[n]}\t{kg.node_kind[n]}\t{kg.literal_text.get(n, '')}\n")


# alignment pairs ------------------------------------------------------------


class AlignmentPair(tuple):
    """``(src, tgt, label)`` with ``label`` 1 for a match and 0 otherwise."""

    __slots__ = ()

    def __new__(cls, src, tgt, label):
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        return super().__new__(cls, (src, tgt, int(label)))

    src = property(lambda self: self[0])
    tgt = property(lambda self: self[1])
    label = property(lambda self: self[2])

    def __repr__(self):
        return f"AlignmentPair({self[0]!r}, {self[1]!r}, {self[2]})"


class AlignmentDataset:
    """Labelled cross-graph entity pairs."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        seen = set()
        for p in self.pairs:
            key = (p.src, p.tgt)
            if key in seen:
                raise ValueError(f"duplicate pair {key}")
            seen.add(key)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def positives(self):
        return [p for p in self.pairs if p.label == 1]

    @property
    def negatives(self):
        return [p for p in self.pairs if p.label == 0]

    def labels(self):
        return [p.label for p in self.pairs]

    def validate(self, pair, entity_type=None):
        for p in self.pairs:
            for side, node in (("s", p.src), ("t", p.tgt)):
                g = pair.graph(side)
                if node not in g.nodes or g.node_kind[node] != ENTITY:
                    raise KGError(f"pair endpoint {node!r} is not an entity of the {side} graph")
                if entity_type is not None and g.node_type[node] != entity_type:
                    raise KGError(f"pair endpoint {node!r} has type {g.node_type[node]!r}")


def load_pairs(path):
    pairs = []
    for lineno, fields in _read_rows(path):
        if len(fields) != 3:
            raise ParseError(path, lineno, f"expected src, tgt, label; got {len(fields)} fields")
        try:
            label = int(fields[2])
        except ValueError:
            raise ParseError(path, lineno, f"label {fields[2]!r} is not 0/1") from None
        pairs.append(AlignmentPair(fields[0], fields[1], label))
    return AlignmentDataset(pairs)


def save_pairs(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in dataset.pairs:
            fh.write(f"{p.src}\t{p.tgt}\t{p.label}\n")
