"""Relation-aware GNN layer with partitioned attention, and the pair classifier.

The functions here work on one node (or one pair) at a time with plain numpy
and mirror the layer equations term by term.  :mod:`vulnalign.model` runs
the same computation vectorised over whole graphs with gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kg import ConfigError, ENTITY

HIDDEN_DIM = 64
LEAKY_SLOPE = 0.2


class ModelParams:
    """Named float64 tensors plus the static settings they were built for."""

    def __init__(self, tensors, meta):
        self.tensors = dict(tensors)
        self.meta = dict(meta)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(sorted(self.tensors))

    def names(self):
        return sorted(self.tensors)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.meta)

    @property
    def epsilon(self):
        return self.meta.get("epsilon")

    @property
    def dim(self):
        return self.meta["dim"]

    def n_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))

    def check_finite(self):
        for name, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"parameter {name} has non-finite entries")


def init_params(relations, node_types, feature_dim, dim=HIDDEN_DIM, hidden=None,
                n_layers=2, seed=0, epsilon=None):
    """Fan-in scaled uniform initialisation, zero biases.

    Every relation and node type gets its own transforms, shared between the
    two graphs of a pair.  Attention vectors for the traditional-attention
    ablation are always allocated so one checkpoint layout serves all
    variants.
    """
    rng = np.random.default_rng(seed)
    hidden = hidden or dim
    tensors = {}

    def uniform(name, shape, fan_in):
        bound = np.sqrt(3.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)

    for r in relations:
        uniform(f"agg.W.{r}", (dim, feature_dim), feature_dim)
    uniform("in.W", (dim, feature_dim), feature_dim)
    for layer in range(1, n_layers + 1):
        for t in node_types:
            uniform(f"gnn{layer}.Wt.{t}", (dim, dim), dim)
        for r in relations:
            uniform(f"gnn{layer}.Wr.{r}", (dim, dim), dim)
            uniform(f"gnn{layer}.att.{r}", (2 * dim,), 2 * dim)
        uniform(f"gnn{layer}.Wo", (dim, 2 * dim), 2 * dim)
    uniform("cls.W1", (hidden, dim), dim)
    tensors["cls.b1"] = np.zeros(hidden)
    uniform("cls.w2", (hidden,), hidden)
    tensors["cls.b2"] = np.zeros(1)
    meta = {
        "relations": list(relations),
        "node_types": list(node_types),
        "feature_dim": feature_dim,
        "dim": dim,
        "hidden": hidden,
        "n_layers": n_layers,
        "seed": seed,
        "epsilon": epsilon,
        "init": "uniform(+-sqrt(3/fan_in)), zero bias",
    }
    return ModelParams(tensors, meta)


# closed-form pieces -----------------------------------------------------------


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def node_attention(h_i, h_j, W_t, W_r):
    """Cosine similarity of the self-transformed ``h_i`` and relation-transformed ``h_j``."""
    return cosine(np.asarray(W_t) @ h_i, np.asarray(W_r) @ h_j)


def group_masses(partition, epsilon):
    """Total attention mass ``(profiling, non_profiling)``.

    When one group is empty the other receives all the mass and ``epsilon``
    must be ``None``.
    """
    if not partition.non_profiling or not partition.profiling:
        if epsilon is not None:
            raise ConfigError("epsilon requires both profiling and non-profiling relations")
        return (1.0, 0.0) if partition.profiling else (0.0, 1.0)
    partition.check_epsilon(epsilon)
    return partition.rho + epsilon, 1.0 - partition.rho - epsilon


def partitioned_attention(partition, s_means, epsilon):
    """``beta_ir`` for the relations in ``s_means`` (mean node attention per relation).

    Each group is a separate softmax scaled by ``1/2 + delta``, which works
    out to ``rho + epsilon`` for profiling relations and ``1 - rho - epsilon``
    for the rest.
    """
    mp, mn = group_masses(partition, epsilon)
    beta = {}
    for mass, group in ((mp, partition.profiling), (mn, partition.non_profiling)):
        rels = [r for r in partition.relations if r in group and r in s_means]
        if not rels:
            continue
        scores = np.array([s_means[r] for r in rels])
        e = np.exp(scores - scores.max())
        for r, w in zip(rels, e / e.sum()):
            beta[r] = mass * w
    return beta


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def traditional_attention(h_i, neighbors, W_r, w_r):
    """One softmax over every ``(r, j)`` of ``leaky(w_r . [h_i || W_r h_j])``.

    ``neighbors`` is a list of ``(relation, h_j)``; returns weights in the same
    order.
    """
    if not neighbors:
        return np.zeros(0)
    scores = np.array([
        float(leaky_relu(w_r[r] @ np.concatenate([h_i, W_r[r] @ h_j]))) for r, h_j in neighbors
    ])
    e = np.exp(scores - scores.max())
    return e / e.sum()


def classifier_forward(h_src, h_tgt, params):
    """Match probability from the elementwise absolute embedding discrepancy."""
    h_src, h_tgt = np.asarray(h_src), np.asarray(h_tgt)
    if h_src.shape != h_tgt.shape:
        raise ValueError(f"embedding shapes differ: {h_src.shape} vs {h_tgt.shape}")
    x = np.abs(h_src - h_tgt)
    hidden = np.maximum(params["cls.W1"] @ x + params["cls.b1"], 0.0)
    z = float(params["cls.w2"] @ hidden + params["cls.b2"][0])
    return 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))


@dataclass
class LayerOutput:
    embeddings: dict
    attention_trace: dict = field(default_factory=dict)


def layer_forward(kg, layer, params, prev, partition, epsilon, traditional=False, trace=False):
    """One GNN layer over ``kg`` with per-node loops.

    ``prev`` maps node -> previous embedding.  Nodes without out-neighbours
    keep only the self term.
    """
    Wo = params[f"gnn{layer}.Wo"]
    out, tr = {}, {}
    for i in sorted(kg.nodes):
        h_i = prev[i]
        W_t = params[f"gnn{layer}.Wt.{kg.node_type[i]}"]
        self_term = W_t @ h_i
        if self_term.shape[0] != Wo.shape[1] // 2:
            raise ValueError("self transform output does not match the layer width")
        z = np.zeros_like(self_term)
        rels = [r for r in partition.relations if kg.neighbors(i, r)]
        if rels and traditional:
            pairs = [(r, j) for r in rels for j in sorted(kg.neighbors(i, r))]
            W_r = {r: params[f"gnn{layer}.Wr.{r}"] for r in rels}
            w_r = {r: params[f"gnn{layer}.att.{r}"] for r in rels}
            alpha = traditional_attention(h_i, [(r, prev[j]) for r, j in pairs], W_r, w_r)
            for (r, j), a in zip(pairs, alpha):
                z = z + a * (W_r[r] @ prev[j])
        elif rels:
            s, s_means = {}, {}
            for r in rels:
                W_r = params[f"gnn{layer}.Wr.{r}"]
                vals = [node_attention(h_i, prev[j], W_t, W_r) for j in sorted(kg.neighbors(i, r))]
                for j, v in zip(sorted(kg.neighbors(i, r)), vals):
                    s[(r, j)] = v
                s_means[r] = float(np.mean(vals))
            beta = partitioned_attention(partition, s_means, epsilon)
            for (r, j), v in s.items():
                z = z + v * beta[r] * (params[f"gnn{layer}.Wr.{r}"] @ prev[j])
            if trace:
                for r, b in beta.items():
                    tr[(i, r)] = b
                for (r, j), v in s.items():
                    tr[(i, r, j)] = v
        out[i] = np.maximum(Wo @ np.concatenate([self_term, z]), 0.0)
    return LayerOutput(out, tr)


def entity_types(kg):
    return sorted({kg.node_type[n] for n in kg.nodes if kg.node_kind[n] == ENTITY})
