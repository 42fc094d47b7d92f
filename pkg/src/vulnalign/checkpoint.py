"""Byte-stable parameter checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, uint64 header
length, a canonical JSON header (tensor names, shapes, metadata), then every
tensor as little-endian float64 in header order.  Nothing time-dependent is
stored, so identical parameters always give identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .gnn import ModelParams

MAGIC = b"VALIGNCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class SchemaMismatch(CheckpointError):
    def __init__(self, expected, found):
        self.missing = sorted(set(expected) - set(found))
        self.extra = sorted(set(found) - set(expected))
        super().__init__(
            f"checkpoint relations differ from the data schema: "
            f"missing from checkpoint {self.missing}, not in data {self.extra}"
        )


def _header_bytes(params):
    names = params.names()
    header = {
        "tensors": [[n, list(params[n].shape)] for n in names],
        "meta": params.meta,
    }
    return names, json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(params):
    names, header = _header_bytes(params)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    parts += [np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names]
    return b"".join(parts)


def loads(blob):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, length = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}; this build reads version {VERSION}")
    offset = 8 + 12
    header = json.loads(blob[offset:offset + length].decode("utf-8"))
    offset += length
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    return ModelParams(tensors, header["meta"])


def save(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path, relations=None):
    """Read a checkpoint; with ``relations`` given, insist they match the stored set."""
    with open(path, "rb") as fh:
        params = loads(fh.read())
    if relations is not None and set(relations) != set(params.meta.get("relations", ())):
        raise SchemaMismatch(relations, params.meta.get("relations", ()))
    return params
