"""Watch the mask gate suppress an attribute two sources disagree on.

Two advisories describe the same flaw.  They agree on vendor and product but
report different versions, so the version relation is the one the gate should
shrink when the source entity is compared with its candidate.
"""

import numpy as np

from vulnalign.aggregation import aggregate_entity, candidate_correspondence, entity_stack, mask_gate
from vulnalign.features import init_features
from vulnalign.kg import ENTITY, LITERAL, KGPair, KnowledgeGraph, partition_relations

schema = partition_relations([("hasVendor", True), ("hasProduct", True), ("hasVersion", False)])


def advisory(prefix, version):
    nodes = {f"{prefix}:vuln": ("Vulnerability", ENTITY, None),
             f"{prefix}:vendor": ("Vendor", LITERAL, "siemens"),
             f"{prefix}:product": ("Product", LITERAL, "sinema remote connect"),
             f"{prefix}:version": ("Version", LITERAL, version)}
    triples = [(f"{prefix}:vuln", "hasVendor", f"{prefix}:vendor"),
               (f"{prefix}:vuln", "hasProduct", f"{prefix}:product"),
               (f"{prefix}:vuln", "hasVersion", f"{prefix}:version")]
    return KnowledgeGraph({n: v[0] for n, v in nodes.items()}, {n: v[1] for n, v in nodes.items()},
                          {n: v[2] for n, v in nodes.items() if v[2] is not None}, triples, schema.relations)


pair = KGPair(advisory("cert", "3.0"), advisory("nvd", "2.1 sp4"))
fs = init_features(pair.source, dim=32)
ft = init_features(pair.target, dim=32)
rng = np.random.default_rng(0)
W = {r: rng.normal(scale=0.3, size=(8, 32)) for r in schema.relations}

print("candidates of cert:vuln:", sorted(pair.candidate_set("cert:vuln", "s")))
reprs, stack = entity_stack(pair, "cert:vuln", W, fs, schema.relations, "s")
cand_reprs, cand_stack = entity_stack(pair, "nvd:vuln", W, ft, schema.relations, "t")
c = candidate_correspondence(stack, [cand_stack])
print("correspondence:", c)
for n, r in enumerate(schema.relations):
    gate = mask_gate(reprs[n], [cand_reprs[n]], c).diag
    print(f"{r:12s} mean gate {gate.mean():.3f}  min {gate.min():.3f}")

masked = aggregate_entity(pair, "cert:vuln", W, fs, ft, schema.relations, "s")
plain = aggregate_entity(pair, "cert:vuln", W, fs, ft, schema.relations, "s", use_mask=False)
other = aggregate_entity(pair, "nvd:vuln", W, ft, fs, schema.relations, "t")
print(f"distance to the NVD entity: masked {np.linalg.norm(masked - other):.3f}, "
      f"unmasked {np.linalg.norm(plain - other):.3f}")
