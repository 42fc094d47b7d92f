"""Synthetic paired vulnerability graphs with known alignments.

The target graph plays the role of the reference database; the source graph
holds noisy copies of part of it plus unaligned near-duplicates.  Two knobs
control how hard the data are:

* ``pos_inconsistency_rate``: share of positive pairs whose artifacts disagree
  in more than half of the attribute types present;
* ``confusable_negative_rate``: share of negative pairs that differ in at most
  a quarter of the types (always including a profiling artifact).

The generator records which pairs it perturbed, so the measured statistics can
be checked against its own bookkeeping.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .kg import (
    ENTITY,
    LITERAL,
    AlignmentDataset,
    AlignmentPair,
    KGPair,
    KnowledgeGraph,
    default_schema,
)
from .training import negative_sample

_SYLLABLES = (
    "ka", "lo", "mi", "ne", "su", "ra", "to", "vi", "ze", "qu", "bo", "dy", "fe", "gi",
    "ha", "ju", "ko", "lu", "ma", "no", "pe", "ri", "sa", "ti", "vo", "wa", "xi", "yo",
    "br", "cr", "dr", "gr", "pl", "st", "tr", "vel", "nix", "tek", "zor", "lan", "mor",
)
_CONSEQUENCES = (
    "denial of service", "remote code execution", "information disclosure",
    "privilege escalation", "authentication bypass", "memory corruption",
    "arbitrary file read", "cross-site scripting", "command injection", "session hijacking",
)
_PRODUCT_SUFFIXES = ("server", "firmware", "web interface", "controller", "gateway", "suite")
_VERSION_SUFFIXES = ("sp1", "sp2", "update 3", "build 7", "lts")

# relative vocabulary size per relation (times n_target_entities)
_VOCAB_FACTORS = {
    "hasVendor": 0.25,
    "hasProduct": 0.6,
    "hasVersion": 0.8,
    "hasWeakness": 0.2,
    "hasCWE": 0.2,
    "hasImpact": 0.5,
    "hasDiscoverer": 0.4,
    "hasCVSSv2Vector": 0.4,
    "hasCVSSv3Vector": 0.4,
    "hasCVSSv2Score": 0.2,
    "hasCVSSv3Score": 0.2,
}


# scores on a 0.01 grid over [0, 10]; finer than real CVSS so score
# collisions, and hence candidate sets, stay bounded as graphs grow
_SCORE_GRID = 1001


class GenerationError(Exception):
    pass


def attr_match(a, b):
    """Two normalised artifact values match if equal or one contains the other."""
    return a == b or a in b or b in a


@dataclass
class SynthConfig:
    n_target_entities: int = 500
    aligned_fraction: float = 0.5
    unaligned_fraction: float = 0.0
    pos_inconsistency_rate: float = 0.56
    confusable_negative_rate: float = 0.0404
    drop_artifact_prob: float = 0.05
    variant_prob: float = 0.3
    profiling_perturb_weight: float = 0.02
    negatives_per_entity: int = 10
    schema: str = "cert"
    vocab: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self):
        for name in ("aligned_fraction", "unaligned_fraction", "pos_inconsistency_rate",
                     "confusable_negative_rate", "drop_artifact_prob", "variant_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise GenerationError(f"{name}={value!r} must lie in [0, 1]")
        if self.n_target_entities < 2:
            raise GenerationError("n_target_entities must be >= 2")
        if self.profiling_perturb_weight <= 0:
            raise GenerationError("profiling_perturb_weight must be > 0")
        if self.negatives_per_entity < 1:
            raise GenerationError("negatives_per_entity must be >= 1")
        for r, size in self.vocab.items():
            if size < 2:
                raise GenerationError(f"vocabulary size for {r} must be >= 2")
        if self.confusable_negative_rate * self.negatives_per_entity >= 1.0:
            raise GenerationError(
                "confusable_negative_rate * negatives_per_entity must be < 1: every source "
                "entity contributes at most one confusable negative"
            )

    def vocab_size(self, relation):
        if relation in self.vocab:
            return self.vocab[relation]
        size = max(2, round(_VOCAB_FACTORS.get(relation, 0.3) * self.n_target_entities))
        if relation in ("hasCVSSv2Score", "hasCVSSv3Score"):
            size = min(size, _SCORE_GRID)
        return size

    @classmethod
    def from_mapping(cls, values):
        fields_ = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key.startswith("vocab."):
                kwargs.setdefault("vocab", {})[key[6:]] = int(raw)
                continue
            if key not in fields_:
                raise GenerationError(f"unknown synth config field {key!r}")
            default = fields_[key].default
            try:
                kwargs[key] = type(default)(raw) if not isinstance(default, str) else str(raw)
            except ValueError:
                raise GenerationError(f"invalid value {raw!r} for field {key!r}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_mapping(self):
        out = {k: v for k, v in dataclasses.asdict(self).items() if k != "vocab"}
        for r, size in sorted(self.vocab.items()):
            out[f"vocab.{r}"] = size
        return out


@dataclass
class GroundTruth:
    """Generator bookkeeping: which pairs were made inconsistent or confusable."""

    n_positive: int
    n_negative: int
    inconsistent_positives: int
    confusable_negatives: int
    n_source_entities: int
    n_target_entities: int

    @property
    def positive_inconsistency(self):
        return self.inconsistent_positives / self.n_positive if self.n_positive else 0.0

    @property
    def negative_similarity(self):
        return self.confusable_negatives / self.n_negative if self.n_negative else 0.0

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["positive_inconsistency"] = self.positive_inconsistency
        out["negative_similarity"] = self.negative_similarity
        return out


# vocabulary -----------------------------------------------------------------


class _Vocab:
    def __init__(self, rng):
        self.rng = rng

    def word(self, lo=2, hi=4):
        n = int(self.rng.integers(lo, hi + 1))
        return "".join(self.rng.choice(_SYLLABLES) for _ in range(n))

    def unique(self, make, size, existing=()):
        """``size`` values from ``make`` with no value a substring of another."""
        out = []
        taken = list(existing)
        tries = 0
        while len(out) < size:
            tries += 1
            if tries > 200 * size + 1000:
                raise GenerationError(f"cannot draw {size} distinct non-overlapping tokens")
            v = make()
            if any(attr_match(v, w) for w in taken):
                continue
            out.append(v)
            taken.append(v)
        return out


def _cvss_v2(rng):
    return "av:{}/ac:{}/au:{}/c:{}/i:{}/a:{}".format(
        rng.choice(list("nal")), rng.choice(list("lmh")), rng.choice(list("nsm")),
        *(rng.choice(list("npc")) for _ in range(3)),
    )


def _cvss_v3(rng):
    return "av:{}/ac:{}/pr:{}/ui:{}/s:{}/c:{}/i:{}/a:{}".format(
        rng.choice(list("nalp")), rng.choice(list("lh")), rng.choice(list("nlh")),
        rng.choice(list("nr")), rng.choice(list("uc")),
        *(rng.choice(list("nlh")) for _ in range(3)),
    )


def _build_vocab(cfg, relations, rng):
    voc = _Vocab(rng)
    vocab = {}
    n_vendor = cfg.vocab_size("hasVendor")
    vendors = voc.unique(lambda: voc.word(3, 4), n_vendor)
    vocab["hasVendor"] = vendors
    products = voc.unique(lambda: f"{voc.word(2, 3)} {voc.word(2, 3)}", cfg.vocab_size("hasProduct"))
    vocab["hasProduct"] = products
    # every product belongs to one vendor
    vocab["_product_vendor"] = [int(rng.integers(n_vendor)) for _ in products]
    vocab["hasVersion"] = voc.unique(
        lambda: "ver {:02d}.{:02d}.{:02d}".format(*rng.integers(0, 100, size=3)),
        cfg.vocab_size("hasVersion"),
    )
    weak = voc.unique(lambda: f"improper {voc.word(2, 3)} {voc.word(2, 3)}", cfg.vocab_size("hasWeakness"))
    vocab["hasWeakness"] = weak
    vocab["hasCWE"] = [f"cwe-{k:04d}" for k in rng.choice(9000, size=len(weak), replace=False) + 1000]
    vocab["hasImpact"] = voc.unique(
        lambda: f"{rng.choice(_CONSEQUENCES)} via {voc.word(2, 3)} {voc.word(2, 3)}",
        cfg.vocab_size("hasImpact"),
    )
    vocab["hasDiscoverer"] = voc.unique(lambda: f"{voc.word(2, 3)} {voc.word(3, 4)}", cfg.vocab_size("hasDiscoverer"))
    vocab["hasCVSSv2Vector"] = voc.unique(lambda: _cvss_v2(rng), cfg.vocab_size("hasCVSSv2Vector"))
    vocab["hasCVSSv3Vector"] = voc.unique(lambda: _cvss_v3(rng), cfg.vocab_size("hasCVSSv3Vector"))
    for rel, tag in (("hasCVSSv2Score", "v2"), ("hasCVSSv3Score", "v3")):
        # fixed-width tokens, so no score is a substring of another
        scores = [f"{tag} {k / 100:05.2f}" for k in rng.permutation(_SCORE_GRID)]
        kept = []
        for s in scores:
            if not any(attr_match(s, t) for t in kept):
                kept.append(s)
            if len(kept) == cfg.vocab_size(rel):
                break
        vocab[rel] = kept
    for r in relations:
        if r not in vocab:
            vocab[r] = voc.unique(lambda: voc.word(3, 4), cfg.vocab_size(r))
    return vocab


def _sample_entity(vocab, relations, rng, drop_prob):
    """Artifact values per relation for one target entity."""
    values = {}
    vendor = int(rng.integers(len(vocab["hasVendor"])))
    owned = [k for k, v in enumerate(vocab["_product_vendor"]) if v == vendor]
    if not owned:
        owned = [int(rng.integers(len(vocab["hasProduct"])))]
    weak = int(rng.integers(len(vocab["hasWeakness"])))
    for r in relations:
        if r == "hasVendor":
            vals = [vocab[r][vendor]]
        elif r == "hasProduct":
            n = 2 if (rng.random() < 0.2 and len(owned) > 1) else 1
            vals = [vocab[r][k] for k in rng.choice(owned, size=n, replace=False)]
        elif r == "hasWeakness":
            vals = [vocab[r][weak]]
        elif r == "hasCWE":
            vals = [vocab[r][weak]]
        elif r in ("hasVersion", "hasImpact"):
            n = 2 if rng.random() < 0.2 else 1
            vals = list(rng.choice(vocab[r], size=n, replace=False))
        else:
            vals = [vocab[r][int(rng.integers(len(vocab[r])))]]
        values[r] = sorted(set(str(v) for v in vals))
    droppable = [r for r in relations if r not in ("hasVendor", "hasProduct")]
    for r in droppable:
        if rng.random() < drop_prob:
            del values[r]
    return values


def _variant(value, relation, rng):
    """A different surface form that still substring-matches ``value``."""
    if relation == "hasProduct":
        return f"{value} {rng.choice(_PRODUCT_SUFFIXES)}"
    if relation == "hasVersion":
        return f"{value} {rng.choice(_VERSION_SUFFIXES)}"
    if relation in ("hasImpact", "hasWeakness", "hasDiscoverer"):
        return f"{value} {rng.choice(('issue', 'flaw', 'vulnerability', 'problem'))}"
    return value


def _replacement(relation, originals, vocab, rng):
    """Fresh values of ``relation`` that match none of ``originals``."""
    pool = [v for v in vocab[relation] if not any(attr_match(v, o) for o in originals)]
    if not pool:
        raise GenerationError(f"vocabulary of {relation} too small to draw a non-matching value")
    return [str(pool[int(rng.integers(len(pool)))])]


def _inconsistent_types(values_s, values_t, relations):
    """Number of attribute types in disagreement and number of types compared."""
    bad = total = 0
    for r in relations:
        a, b = values_s.get(r, []), values_t.get(r, [])
        if not a and not b:
            continue
        total += 1
        if not a or not b or not any(attr_match(x, y) for x in a for y in b):
            bad += 1
    return bad, total


def _perturb_positive(values, relations, profiling, k, vocab, rng, profiling_weight):
    # matching reports mostly agree on profiling artifacts, so those are
    # perturbed with a lower relative weight
    weights = np.array([profiling_weight if r in profiling else 1.0 for r in relations])
    chosen = rng.choice(len(relations), size=k, replace=False, p=weights / weights.sum())
    out = {r: list(v) for r, v in values.items()}
    for idx in sorted(chosen):
        r = relations[idx]
        if rng.random() < 0.25:
            del out[r]
        else:
            out[r] = _replacement(r, values[r], vocab, rng)
    return out


def generate_pair(config=None, schema=None):
    """Build ``(KGPair, AlignmentDataset, GroundTruth)`` deterministically from ``config``."""
    cfg = config or SynthConfig()
    cfg.validate()
    schema = schema or default_schema(cfg.schema)
    relations = list(schema.relations)
    profiling = schema.profiling
    rng = np.random.default_rng(cfg.seed)
    vocab = _build_vocab(cfg, relations, rng)

    n_t = cfg.n_target_entities
    target_vals = [_sample_entity(vocab, relations, rng, cfg.drop_artifact_prob) for _ in range(n_t)]
    target_ids = [f"t{k:05d}" for k in range(n_t)]

    n_aligned = round(cfg.aligned_fraction * n_t)
    n_plain = round(cfg.unaligned_fraction * n_t)
    k_neg = cfg.negatives_per_entity
    base = n_aligned + n_plain
    n_conf = round(cfg.confusable_negative_rate * k_neg * base / (1.0 - cfg.confusable_negative_rate * k_neg))
    if n_conf > n_t:
        raise GenerationError("too many confusable entities requested for the target graph size")
    if base + n_conf == 0:
        raise GenerationError("configuration produces an empty source graph")
    n_src = base + n_conf
    if n_t <= k_neg:
        raise GenerationError("target graph must have more entities than negatives_per_entity")

    order = rng.permutation(n_t)
    aligned_targets = sorted(order[:n_aligned].tolist())
    n_incons = round(cfg.pos_inconsistency_rate * n_aligned)
    incons_set = set(rng.choice(aligned_targets, size=n_incons, replace=False).tolist()) if n_incons else set()

    # source entity ids are a random permutation so ids leak nothing
    src_ids = [f"s{k:05d}" for k in rng.permutation(n_src)]
    source_vals, positives, forced = [], [], {}
    sid = iter(src_ids)
    incons_done = 0
    for t in aligned_targets:
        vals = target_vals[t]
        present = [r for r in relations if r in vals]
        T = len(present)
        if t in incons_set:
            k = min(T // 2 + 1, T)
            copy = _perturb_positive(vals, present, profiling, k, vocab, rng,
                                     cfg.profiling_perturb_weight)
        else:
            copy = {r: list(v) for r, v in vals.items()}
        for r in list(copy):
            if copy[r] == vals.get(r) and rng.random() < cfg.variant_prob:
                copy[r] = sorted({_variant(v, r, rng) for v in copy[r]})
        bad, total = _inconsistent_types(copy, vals, relations)
        if t in incons_set:
            if not bad * 2 > total:
                raise GenerationError("internal: inconsistent positive not perturbed enough")
            incons_done += 1
        elif bad != 0:
            raise GenerationError("internal: consistent positive has a mismatching type")
        s = next(sid)
        source_vals.append((s, copy))
        positives.append(AlignmentPair(s, target_ids[t], 1))

    for _ in range(n_plain):
        source_vals.append((next(sid), _sample_entity(vocab, relations, rng, cfg.drop_artifact_prob)))

    templates = rng.choice(n_t, size=n_conf, replace=False).tolist() if n_conf else []
    conf_done = 0
    for t in templates:
        vals = target_vals[t]
        present = [r for r in relations if r in vals]
        prof_present = [r for r in present if r in profiling]
        if not prof_present:
            raise GenerationError("template entity has no profiling artifact to change")
        limit = len(present) // 4
        if limit < 1:
            raise GenerationError("too few attribute types to build a confusable entity")
        changed = [prof_present[int(rng.integers(len(prof_present)))]]
        if limit >= 2 and rng.random() < 0.5:
            rest = [r for r in present if r not in changed]
            changed.append(rest[int(rng.integers(len(rest)))])
        copy = {r: list(v) for r, v in vals.items()}
        for r in changed:
            copy[r] = _replacement(r, vals[r], vocab, rng)
        bad, total = _inconsistent_types(copy, vals, relations)
        if not 1 <= bad <= total / 4:
            raise GenerationError("internal: confusable entity outside the quarter bound")
        s = next(sid)
        source_vals.append((s, copy))
        forced[s] = [target_ids[t]]
        conf_done += 1

    source = _build_graph(source_vals, schema)
    target = _build_graph(list(zip(target_ids, target_vals)), schema)
    pair = KGPair(source, target)
    negatives = negative_sample(pair, positives, k_neg, cfg.seed, forced=forced,
                                entity_type=schema.entity_type)
    dataset = AlignmentDataset(sorted(positives + negatives))
    truth = GroundTruth(
        n_positive=len(positives),
        n_negative=len(negatives),
        inconsistent_positives=incons_done,
        confusable_negatives=conf_done,
        n_source_entities=n_src,
        n_target_entities=n_t,
    )
    return pair, dataset, truth


def _build_graph(entities, schema):
    node_type, node_kind, text, triples = {}, {}, {}, []
    for eid, values in entities:
        node_type[eid] = schema.entity_type
        node_kind[eid] = ENTITY
        for r in schema.relations:
            for v in values.get(r, ()):
                ltype = schema.tail_type(r)
                lid = f"{ltype}:{v}"
                node_type[lid] = ltype
                node_kind[lid] = LITERAL
                text[lid] = v
                triples.append((eid, r, lid))
    return KnowledgeGraph(node_type, node_kind, text, triples, schema.relations)


# measurement ----------------------------------------------------------------


@dataclass(frozen=True)
class InconsistencyStats:
    positive_inconsistency: float
    negative_similarity: float
    n_positive: int
    n_negative: int


def _values(kg, node, relation):
    return [kg.literal_text[j] for j in kg.neighbors(node, relation) if j in kg.literal_text]


def measure_inconsistency(pair, dataset, relations=None):
    """Share of positives inconsistent in more than half of the attribute types,
    and share of negatives differing in at most a quarter of them.

    A type missing on exactly one side counts as inconsistent; a type missing
    on both sides is not compared.
    """
    relations = relations or pair.source.relations
    pos_bad = neg_close = n_pos = n_neg = 0
    for p in dataset:
        vs = {r: _values(pair.source, p.src, r) for r in relations}
        vt = {r: _values(pair.target, p.tgt, r) for r in relations}
        bad, total = _inconsistent_types(vs, vt, relations)
        if p.label == 1:
            n_pos += 1
            pos_bad += bad * 2 > total
        else:
            n_neg += 1
            neg_close += bad * 4 <= total
    return InconsistencyStats(
        pos_bad / n_pos if n_pos else 0.0,
        neg_close / n_neg if n_neg else 0.0,
        n_pos,
        n_neg,
    )
