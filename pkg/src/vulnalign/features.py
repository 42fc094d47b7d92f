"""Initial node features.

Literal artifacts are embedded from their text with hashed character
trigrams (or read from an external vector file).  ID-like entities carry no
semantic feature of their own and get a zero placeholder; their first
representation comes from masked aggregation.
"""

from __future__ import annotations

import hashlib
import logging
from functools import lru_cache

import numpy as np

from .kg import ENTITY, normalize_text

log = logging.getLogger(__name__)

DEFAULT_DIM = 100


class CoverageError(Exception):
    """A literal node has no feature vector and no fallback embedder."""


@lru_cache(maxsize=65536)
def _trigram_basis(gram, dim, seed):
    digest = hashlib.blake2b(f"{seed}\x00{gram}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


def trigrams(text):
    padded = f"#{text}#"
    if len(padded) < 3:
        return [padded]
    return [padded[k:k + 3] for k in range(len(padded) - 2)]


def hash_embed(text, dim=DEFAULT_DIM, seed=0):
    """L2-normalised mean of hashed character-trigram basis vectors.

    Deterministic in ``(text, dim, seed)``.  The empty string maps to the zero
    vector.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if text == "":
        log.debug("hash_embed: empty text mapped to zero vector")
        return np.zeros(dim)
    grams = trigrams(text)
    vec = np.sum([_trigram_basis(g, dim, seed) for g in grams], axis=0) / len(grams)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


class FeatureTable:
    """Mapping from node id to a fixed-length feature vector."""

    def __init__(self, dim=DEFAULT_DIM, vectors=None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.vectors = {}
        for node, vec in (vectors or {}).items():
            self[node] = vec

    def __setitem__(self, node, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector for {node!r} has shape {vec.shape}, expected ({self.dim},)")
        self.vectors[node] = vec

    def __getitem__(self, node):
        return self.vectors[node]

    def __contains__(self, node):
        return node in self.vectors

    def __len__(self):
        return len(self.vectors)

    def get(self, node, default=None):
        return self.vectors.get(node, default)

    def matrix(self, nodes):
        if not nodes:
            return np.zeros((0, self.dim))
        return np.stack([self.vectors[n] for n in nodes])


def load_vectors(path, dim=None):
    """Read ``node-id v1 ... vdim`` lines into a :class:`FeatureTable`."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            node, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            vectors[node] = np.array([float(v) for v in values])
    return FeatureTable(dim or DEFAULT_DIM, vectors)


def save_vectors(table, path):
    with open(path, "w", encoding="utf-8") as fh:
        for node in sorted(table.vectors):
            fh.write(node + " " + " ".join(repr(float(v)) for v in table.vectors[node]) + "\n")


def init_features(kg, table=None, seed=0, dim=None, embed=True, scale=1.0):
    """Feature table covering every node of ``kg``.

    Literal nodes take their vector from ``table`` when present, otherwise
    (if ``embed``) from :func:`hash_embed` of their text, multiplied by
    ``scale``.  Entity nodes get a zero placeholder.
    """
    dim = dim or (table.dim if table is not None else DEFAULT_DIM)
    out = FeatureTable(dim)
    missing = []
    for node in sorted(kg.nodes):
        if kg.node_kind[node] == ENTITY:
            out[node] = np.zeros(dim)
        elif table is not None and node in table:
            out[node] = table[node]
        elif embed:
            out[node] = scale * hash_embed(normalize_text(kg.literal_text[node]), dim, seed)
        else:
            missing.append(node)
    if missing:
        raise CoverageError(f"no feature vector for literal nodes: {missing[:10]}"
                            + (" ..." if len(missing) > 10 else ""))
    return out
