"""Two-stage masked attribute aggregation, one entity at a time.

These functions follow the per-entity definitions directly and are the
readable counterpart of the vectorised pass in :mod:`vulnalign.model`.

Stage 1 builds a relation representation ``phi_i(r)`` as an importance
weighted sum of transformed literal features, where the importance of a
neighbour falls with how many source entities share it relative to both
graphs.  Stage 2 stacks those into ``Phi_i``, scores the cross-graph
candidates of ``i`` by Frobenius distance, and derives a per-attribute gate
in ``(0, 1]`` from the weighted squared disagreement with them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelationRepr:
    entity: str
    relation: str
    phi: np.ndarray
    present: bool


@dataclass(frozen=True)
class EntityStack:
    entity: str
    Phi: np.ndarray  # |R| x dim, rows in schema order


@dataclass(frozen=True)
class MaskGate:
    entity: str
    relation: str
    diag: np.ndarray


def softmax(scores):
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def importance_from_degrees(degrees):
    """Softmax of ``-d / (d + d')`` over a list of ``(d, d')`` pairs."""
    ratios = [d / (d + dp) if d + dp > 0 else 0.0 for d, dp in degrees]
    return softmax([-x for x in ratios])


def neighbor_importance(pair, i, r, side="s"):
    """Weight of each ``j`` in ``N_{i,r}``; an empty dict when the set is empty."""
    g = pair.graph(side)
    nbrs = sorted(g.neighbors(i, r))
    if not nbrs:
        return {}
    w = importance_from_degrees([pair.cross_degree(j, side) for j in nbrs])
    return dict(zip(nbrs, w))


def relation_repr(pair, i, r, W_r, features, side="s"):
    """``phi_i(r) = sum_j alpha_irj W_r h_j``; zero and not present when ``N_{i,r}`` is empty."""
    W_r = np.asarray(W_r)
    weights = neighbor_importance(pair, i, r, side)
    if not weights:
        return RelationRepr(i, r, np.zeros(W_r.shape[0]), False)
    phi = np.zeros(W_r.shape[0])
    for j, w in weights.items():
        h = np.asarray(features[j])
        if h.shape[0] != W_r.shape[1]:
            raise ValueError(f"feature of {j!r} has dim {h.shape[0]}, W_r expects {W_r.shape[1]}")
        phi = phi + w * (W_r @ h)
    return RelationRepr(i, r, phi, True)


def entity_stack(pair, i, W, features, relations, side="s"):
    """Relation representations of ``i`` for every relation, plus their stack."""
    reprs = [relation_repr(pair, i, r, W[r], features, side) for r in relations]
    return reprs, EntityStack(i, np.stack([rep.phi for rep in reprs]))


def candidate_correspondence(stack_i, candidates):
    """Softmax over candidates of the negated Frobenius distance to ``stack_i``."""
    if not candidates:
        return {}
    shape = stack_i.Phi.shape
    dists = []
    for cand in candidates:
        if cand.Phi.shape != shape:
            raise ValueError("candidate stack shape differs from the entity's")
        dists.append(np.linalg.norm(stack_i.Phi - cand.Phi))
    return dict(zip([c.entity for c in candidates], softmax([-d for d in dists])))


def mask_gate(phi_i, candidate_phis, c):
    """Diagonal gate ``exp(-sum_i' c_ii' (phi_i - phi_i')**2)``; identity without candidates."""
    acc = np.zeros_like(phi_i.phi)
    for cand in candidate_phis:
        diff = phi_i.phi - cand.phi
        acc = acc + c[cand.entity] * diff * diff
    return MaskGate(phi_i.entity, phi_i.relation, np.exp(-acc))


def masked_entity_repr(gates, reprs, strict=False):
    """Mean over relations of ``gate * phi``.

    By default the mean runs over present relations only; ``strict`` divides
    by the full relation count instead.  An entity without any present
    relation gets the zero vector.
    """
    if len(gates) != len(reprs):
        raise ValueError("gates and reprs must cover the same relations")
    dim = reprs[0].phi.shape[0]
    total = np.zeros(dim)
    count = 0
    for gate, rep in zip(gates, reprs):
        if gate.relation != rep.relation:
            raise ValueError(f"gate for {gate.relation!r} paired with repr for {rep.relation!r}")
        if rep.present:
            total = total + gate.diag * rep.phi
            count += 1
    if count == 0:
        log.debug("entity %s has no present relation; zero representation", reprs[0].entity)
        return total
    return total / (len(reprs) if strict else count)


def mean_entity_repr(reprs, strict=False):
    gates = [MaskGate(r.entity, r.relation, np.ones_like(r.phi)) for r in reprs]
    return masked_entity_repr(gates, reprs, strict)


def aggregate_entity(pair, i, W, features, other_features, relations, side="s",
                     use_mask=True, strict=False):
    """Layer-0 representation of ``i`` from its literals and its candidates' stacks.

    Candidates live on the other side of the pair, so their stacks are built
    with the roles of the two graphs swapped.
    """
    other = "t" if side == "s" else "s"
    reprs, stack = entity_stack(pair, i, W, features, relations, side)
    if not use_mask:
        return mean_entity_repr(reprs, strict)
    cands = sorted(pair.candidate_set(i, side))
    cand_reprs, cand_stacks = [], []
    for k in cands:
        rk, sk = entity_stack(pair, k, W, other_features, relations, other)
        cand_reprs.append(rk)
        cand_stacks.append(sk)
    c = candidate_correspondence(stack, cand_stacks)
    gates = [
        mask_gate(reprs[n], [cr[n] for cr in cand_reprs], c) for n in range(len(relations))
    ]
    return masked_entity_repr(gates, reprs, strict)
