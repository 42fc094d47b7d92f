"""Vectorised forward pass: masked aggregation, two GNN layers, classifier.

:class:`PairGraph` compiles a :class:`~vulnalign.kg.KGPair` into flat index
arrays once (node order, edges, importance weights, candidate pairs).  Every
forward pass then runs as a handful of dense and sparse array operations
through :mod:`vulnalign.autodiff`, so the same code yields predictions and
gradients.

Both graphs live in one global node numbering (all source nodes, then all
target nodes); they never share an edge, and they share all parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import hash_embed
from .gnn import LEAKY_SLOPE, group_masses
from .kg import ENTITY


@dataclass(frozen=True)
class Variant:
    """Which mechanisms are switched on.  The default is the full model."""

    aggregation: bool = True
    mask: bool = True
    partitioned: bool = True
    strict_mean: bool = False
    profiling_only: bool = False

    @classmethod
    def from_ablation(cls, name):
        table = {
            "full": cls(),
            # without both mechanisms the model reduces to a relational GAT
            "no_aggregation": cls(aggregation=False, partitioned=False),
            "mean_aggregate": cls(mask=False),
            "traditional_attention": cls(partitioned=False),
            "profiling_only": cls(profiling_only=True),
        }
        if name not in table:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(table)}")
        return table[name]


ABLATIONS = ("full", "no_aggregation", "mean_aggregate", "traditional_attention", "profiling_only")


def _segment_softmax_np(scores, segments, n):
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, segments, scores)
    e = np.exp(scores - shift[segments])
    denom = np.bincount(segments, weights=e, minlength=n)
    return e / denom[segments]


class PairGraph:
    """Index arrays for one pair of graphs under one schema."""

    def __init__(self, pair, partition, src_features, tgt_features, id_seed=0):
        self.pair = pair
        self.partition = partition
        self.relations = partition.relations
        R = len(self.relations)
        rel_index = {r: k for k, r in enumerate(self.relations)}

        nodes = [("s", n) for n in sorted(pair.source.nodes)]
        nodes += [("t", n) for n in sorted(pair.target.nodes)]
        self.nodes = nodes
        self.index = {key: k for k, key in enumerate(nodes)}
        N = len(nodes)
        self.n_nodes = N

        def kind(key):
            return pair.graph(key[0]).node_kind[key[1]]

        def ntype(key):
            return pair.graph(key[0]).node_type[key[1]]

        feature_dim = src_features.dim
        if tgt_features.dim != feature_dim:
            raise ValueError("source and target feature dimensions differ")
        self.feature_dim = feature_dim
        X = np.zeros((N, feature_dim))
        for k, key in enumerate(nodes):
            table = src_features if key[0] == "s" else tgt_features
            if kind(key) != ENTITY:
                X[k] = table[key[1]]
        self.X = X

        self.type_names = sorted({ntype(key) for key in nodes})
        type_id = {t: k for k, t in enumerate(self.type_names)}
        self.node_type = np.array([type_id[ntype(key)] for key in nodes], dtype=np.int64)
        self.is_entity = np.array([kind(key) == ENTITY for key in nodes], dtype=bool)
        n_ent = int(self.is_entity.sum())

        # Random-ID features for the no-aggregation ablation, embedded like
        # text and scaled to the mean literal feature norm.
        rng = np.random.default_rng(id_seed)
        ids = rng.permutation(max(n_ent, 1))[:n_ent]
        lit_norms = np.linalg.norm(X[~self.is_entity], axis=1)
        id_scale = float(lit_norms.mean()) if lit_norms.size else 1.0
        self.X_id = (
            id_scale * np.stack([hash_embed(str(100000 + int(v)), feature_dim, id_seed) for v in ids])
            if n_ent else np.zeros((0, feature_dim))
        )

        # edges, ordered by (relation, head, tail)
        edges = []
        for side in ("s", "t"):
            g = pair.graph(side)
            for h, r, t in g.triples:
                if r in rel_index:
                    edges.append((rel_index[r], self.index[(side, h)], self.index[(side, t)]))
        edges.sort()
        e = np.array(edges, dtype=np.int64).reshape(-1, 3)

        # neighbour importance inputs from cross-graph degrees (parameter free)
        ratio = np.zeros(len(edges))
        for k, (_, h, t) in enumerate(edges):
            side, tail = nodes[t]
            d, dp = pair.cross_degree(tail, side)
            ratio[k] = d / (d + dp) if d + dp > 0 else 0.0

        # candidate pairs in both directions, as global node indices
        cand = []
        for (side, e_node), cs in pair.all_candidates().items():
            other = "t" if side == "s" else "s"
            a = self.index[(side, e_node)]
            cand += [(a, self.index[(other, c)]) for c in cs]
        cand.sort()
        cp = np.array(cand, dtype=np.int64).reshape(-1, 2)

        self._compile(self.node_type, self.is_entity, X, self.X_id, e[:, 0], e[:, 1], e[:, 2],
                      ratio, cp[:, 0], cp[:, 1])

        # out-edges and candidates grouped by node, for receptive fields
        self._out_order = np.argsort(self.edge_head, kind="stable")
        self._out_ptr = np.searchsorted(self.edge_head[self._out_order], np.arange(N + 1))
        self._cand_ptr = np.searchsorted(self._cand_node_a, np.arange(N + 1))

    def _compile(self, node_type, is_entity, X, X_id, edge_rel, edge_head, edge_tail, ratio,
                 cand_node_a, cand_node_b):
        """Derive every index array from nodes, edges and candidate pairs."""
        R = len(self.relations)
        N = len(node_type)
        self.n_nodes = N
        self.node_type = node_type
        self.is_entity = is_entity
        self.X = X
        self.X_id = X_id
        self.entity_nodes = np.flatnonzero(is_entity)
        self.literal_nodes = np.flatnonzero(~is_entity)
        n_ent = len(self.entity_nodes)
        self.n_entities = n_ent
        ent_row = np.full(N, -1, dtype=np.int64)
        ent_row[self.entity_nodes] = np.arange(n_ent)
        self.entity_row = {int(g): k for k, g in enumerate(self.entity_nodes)}

        self.edge_rel, self.edge_head, self.edge_tail = edge_rel, edge_head, edge_tail
        self._ratio = ratio
        self.rel_bounds = np.searchsorted(edge_rel, np.arange(R + 1))
        head_rows = ent_row[edge_head]
        if np.any(head_rows < 0):
            raise ValueError("a triple head is not an entity node")
        self.agg_slot = head_rows * R + edge_rel
        self.alpha = (
            _segment_softmax_np(-ratio, self.agg_slot, n_ent * R) if edge_head.size else np.zeros(0)
        )
        present = np.zeros(n_ent * R, dtype=bool)
        present[self.agg_slot] = True
        self.present = present.reshape(n_ent, R)
        self.present_count = self.present.sum(axis=1)

        self._cand_node_a, self._cand_node_b = cand_node_a, cand_node_b
        self.cand_a, self.cand_b = ent_row[cand_node_a], ent_row[cand_node_b]
        self.has_cand = np.zeros(n_ent, dtype=bool)
        self.has_cand[self.cand_a] = True

        # partitioned attention slots: one per (head, relation) with neighbours
        slot_key = edge_head * R + edge_rel
        uniq, self.gnn_slot = np.unique(slot_key, return_inverse=True)
        self.n_gnn_slots = len(uniq)
        slot_rel = uniq % R
        slot_head = uniq // R
        self.slot_count = np.bincount(self.gnn_slot, minlength=self.n_gnn_slots).astype(np.float64)
        prof = np.array([r in self.partition.profiling for r in self.relations], dtype=bool)
        slot_prof = prof[slot_rel] if len(uniq) else np.zeros(0, dtype=bool)
        self.slot_group = slot_head * 2 + slot_prof.astype(np.int64)
        self.slot_is_profiling = slot_prof
        self.slot_head = slot_head
        self.slot_rel = slot_rel

        # node order used to assemble layer-0 rows from [literals; entities]
        order = np.empty(N, dtype=np.int64)
        order[self.literal_nodes] = np.arange(len(self.literal_nodes))
        order[self.entity_nodes] = len(self.literal_nodes) + np.arange(n_ent)
        self.layer0_order = order

        self.type_members = [np.flatnonzero(node_type == k) for k in range(len(self.type_names))]
        type_order = np.concatenate(self.type_members) if N else np.zeros(0, dtype=np.int64)
        inv = np.empty(N, dtype=np.int64)
        inv[type_order] = np.arange(N)
        self.type_inverse = inv

    def _gather(self, ptr, nodes):
        """Positions ``ptr[n]:ptr[n+1]`` for every ``n`` in ``nodes``, concatenated."""
        lo, hi = ptr[nodes], ptr[nodes + 1]
        counts = hi - lo
        if not counts.sum():
            return np.zeros(0, dtype=np.int64)
        starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
        return starts + np.arange(counts.sum())

    def _out_neighbours(self, nodes):
        return self.edge_tail[self._out_order[self._gather(self._out_ptr, nodes)]]

    def receptive_field(self, nodes, n_layers=2):
        """Sorted node indices whose inputs determine the final embeddings of ``nodes``.

        The set is closed under out-edges, so every GNN layer is exact on it,
        and it holds every candidate of each entity whose layer-0 row is used.
        """
        need = np.unique(np.asarray(nodes, dtype=np.int64))
        for _ in range(n_layers):
            need = np.union1d(need, self._out_neighbours(need))
        cands = self._cand_node_b[self._gather(self._cand_ptr, need)]
        field = np.union1d(need, cands)
        return np.union1d(field, self._out_neighbours(cands))

    def subgraph(self, keep):
        """View restricted to sorted global indices ``keep``, with weights of the full graph.

        Returns the view and the array mapping its rows to global indices.
        Edges are kept for every kept head (so ``keep`` must be closed under
        out-edges); candidate pairs only when both ends are kept.
        """
        keep = np.asarray(keep, dtype=np.int64)
        edge_ids = np.sort(self._out_order[self._gather(self._out_ptr, keep)])
        cand_ids = self._gather(self._cand_ptr, keep)
        b = self._cand_node_b[cand_ids]
        pos = np.minimum(np.searchsorted(keep, b), len(keep) - 1)
        cand_ids = cand_ids[keep[pos] == b]

        def local(idx):
            return np.searchsorted(keep, idx)

        view = object.__new__(PairGraph)
        view.pair, view.partition, view.relations = self.pair, self.partition, self.relations
        view.feature_dim, view.type_names = self.feature_dim, self.type_names
        view.nodes = [self.nodes[k] for k in keep]
        view.index = {key: k for k, key in enumerate(view.nodes)}
        ent_rows = np.array([self.entity_row[int(k)] for k in keep if self.is_entity[k]], dtype=np.int64)
        view._compile(
            self.node_type[keep], self.is_entity[keep], self.X[keep],
            self.X_id[ent_rows] if ent_rows.size else np.zeros((0, self.feature_dim)),
            self.edge_rel[edge_ids], local(self.edge_head[edge_ids]), local(self.edge_tail[edge_ids]),
            self._ratio[edge_ids],
            local(self._cand_node_a[cand_ids]), local(self._cand_node_b[cand_ids]),
        )
        return view, keep

    def batch_view(self, src_idx, tgt_idx, n_layers=2):
        """Receptive-field view for a batch and the batch indices inside it."""
        view, keep = self.subgraph(self.receptive_field(np.concatenate([src_idx, tgt_idx]), n_layers))
        return view, np.searchsorted(keep, src_idx), np.searchsorted(keep, tgt_idx)

    def node(self, side, node_id):
        return self.index[(side, node_id)]

    @property
    def max_neighbourhood(self):
        return int(self.slot_count.max()) if self.n_gnn_slots else 0

    @property
    def max_candidates(self):
        return int(np.bincount(self.cand_a).max()) if self.cand_a.size else 0


class Forward:
    """Result of one forward pass; tensors stay attached to the graph."""

    def __init__(self, params, layer0, entity_h0, layers, mask=None):
        self.params = params
        self.layer0 = layer0
        self.entity_h0 = entity_h0
        self.layers = layers
        self.mask = mask

    @property
    def embeddings(self):
        return self.layers[-1]


def _param_tensors(params, requires_grad):
    return {name: ad.Tensor(params[name], requires_grad=requires_grad, name=name) for name in params}


def aggregate(graph, P, variant):
    """Layer-0 entity representations ``(n_entities, dim)`` and the mask (if any)."""
    R = len(graph.relations)
    n_ent = graph.n_entities
    dim = P["in.W"].shape[0]
    if not variant.aggregation:
        return ad.Tensor(graph.X_id) @ P["in.W"].T, None
    msgs = []
    for k, r in enumerate(graph.relations):
        lo, hi = graph.rel_bounds[k], graph.rel_bounds[k + 1]
        if hi > lo:
            msgs.append(ad.Tensor(graph.X[graph.edge_tail[lo:hi]]) @ P[f"agg.W.{r}"].T)
    if not msgs:
        return ad.Tensor(np.zeros((n_ent, dim))), None
    M = ad.concat(msgs, axis=0) * graph.alpha.reshape(-1, 1)
    Phi = ad.segment_sum(M, graph.agg_slot, n_ent * R).reshape(n_ent, R * dim)
    mask = None
    if variant.mask and graph.cand_a.size:
        mask = ad.candidate_gate(Phi, graph.cand_a, graph.cand_b, n_ent)
        gated = mask * Phi
    else:
        gated = Phi
    total = gated.reshape(n_ent, R, dim).sum(axis=1)
    denom = np.full(n_ent, float(R)) if variant.strict_mean else np.maximum(graph.present_count, 1)
    return total / denom.reshape(-1, 1).astype(np.float64), mask


def gnn_layer(graph, P, H, layer, variant, epsilon):
    N = graph.n_nodes
    parts = [
        ad.take(H, members) @ P[f"gnn{layer}.Wt.{graph.type_names[k]}"].T
        for k, members in enumerate(graph.type_members)
    ]
    self_term = ad.take(ad.concat(parts, axis=0), graph.type_inverse)
    E = graph.edge_head.size
    if E == 0:
        z = ad.Tensor(np.zeros(self_term.shape))
    else:
        msgs = []
        for k, r in enumerate(graph.relations):
            lo, hi = graph.rel_bounds[k], graph.rel_bounds[k + 1]
            if hi > lo:
                msgs.append(ad.take(H, graph.edge_tail[lo:hi]) @ P[f"gnn{layer}.Wr.{r}"].T)
        msg = ad.concat(msgs, axis=0)
        if variant.partitioned:
            s = ad.cosine_rows(ad.take(self_term, graph.edge_head), msg)
            s_mean = ad.segment_sum(s, graph.gnn_slot, graph.n_gnn_slots) / graph.slot_count
            soft = ad.segment_softmax(s_mean, graph.slot_group, 2 * N)
            mp, mn = group_masses(graph.partition, epsilon)
            beta = soft * np.where(graph.slot_is_profiling, mp, mn)
            coef = s * ad.take(beta, graph.gnn_slot)
        else:
            dim = H.shape[1]
            att = ad.concat(
                [P[f"gnn{layer}.att.{r}"].reshape(1, 2 * dim) for r in graph.relations], axis=0
            )
            att_e = ad.take(att, graph.edge_rel)
            h_i = ad.take(H, graph.edge_head)
            score = ad.rowsum(h_i * att_e[:, :dim]) + ad.rowsum(msg * att_e[:, dim:])
            coef = ad.segment_softmax(ad.leaky_relu(score, LEAKY_SLOPE), graph.edge_head, N)
        z = ad.segment_sum(msg * coef.reshape(-1, 1), graph.edge_head, N)
    return ad.relu(ad.concat([self_term, z], axis=1) @ P[f"gnn{layer}.Wo"].T)


def forward(graph, params, variant=Variant(), epsilon=None, requires_grad=False, P=None):
    """Full-graph forward pass; returns a :class:`Forward` with every layer."""
    if P is None:
        P = _param_tensors(params, requires_grad)
    if variant.profiling_only:
        epsilon = None
    ent_h0, mask = aggregate(graph, P, variant)
    lit = ad.Tensor(graph.X[graph.literal_nodes]) @ P["in.W"].T
    H = ad.take(ad.concat([lit, ent_h0], axis=0), graph.layer0_order)
    layers = [H]
    for layer in range(1, params.meta["n_layers"] + 1):
        H = gnn_layer(graph, P, H, layer, variant, epsilon)
        layers.append(H)
    return Forward(P, layers[0], ent_h0, layers, mask)


def classifier_logits(P, H, src_idx, tgt_idx):
    diff = ad.abs_(ad.take(H, src_idx) - ad.take(H, tgt_idx))
    hidden = ad.relu(diff @ P["cls.W1"].T + P["cls.b1"])
    w2 = P["cls.w2"].reshape(-1, 1)
    return (hidden @ w2).reshape(-1) + P["cls.b2"]


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy computed from logits without overflow."""
    y = np.asarray(labels, dtype=np.float64)
    return (ad.softplus(logits) - logits * y).mean()


def pair_indices(graph, pairs):
    """Global node indices for ``(src, tgt)`` pairs."""
    src = np.array([graph.index[("s", s)] for s, _ in pairs], dtype=np.int64)
    tgt = np.array([graph.index[("t", t)] for _, t in pairs], dtype=np.int64)
    return src, tgt


def predict(graph, params, pairs, variant=Variant(), epsilon=None, fwd=None):
    """Match probabilities for ``(src, tgt)`` node-id pairs."""
    if fwd is None:
        fwd = forward(graph, params, variant, epsilon)
    src, tgt = pair_indices(graph, pairs)
    z = classifier_logits(fwd.params, fwd.embeddings, src, tgt).data
    return ad._sigmoid(z)


def loss_and_grads(graph, params, src_idx, tgt_idx, labels, variant=Variant(), epsilon=None):
    """Scalar loss and ``{name: gradient}`` for one batch of pairs."""
    fwd = forward(graph, params, variant, epsilon, requires_grad=True)
    loss = bce_with_logits(classifier_logits(fwd.params, fwd.embeddings, src_idx, tgt_idx), labels)
    loss.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in fwd.params.items()
    }
    return float(loss.data), grads


def loss_value(graph, params, src_idx, tgt_idx, labels, variant=Variant(), epsilon=None):
    fwd = forward(graph, params, variant, epsilon)
    return float(bce_with_logits(classifier_logits(fwd.params, fwd.embeddings, src_idx, tgt_idx), labels).data)
