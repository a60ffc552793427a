"""Layered model-parameter vectors, client update batches, and their arithmetic.

A model's parameters are kept as named blocks (weights and biases of each
layer counted separately) flattened into one contiguous float64 array. All
values are immutable after construction; every operation returns new objects.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError, UsageError

_MAGIC_VECTOR = b"FGLV"
_VERSION = 1


@dataclass(frozen=True)
class Schema:
    """Ordered (name, length) table describing the layer blocks of a model."""

    names: tuple
    lengths: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lengths", tuple(int(l) for l in self.lengths))
        if len(self.names) != len(self.lengths):
            raise SchemaError("names and lengths differ in count")
        if not self.names:
            raise SchemaError("a schema needs at least one layer")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("layer names must be unique")
        if any(l <= 0 for l in self.lengths):
            raise SchemaError("layer lengths must be positive")
        object.__setattr__(self, "_offsets", tuple(np.cumsum((0,) + self.lengths[:-1]).tolist()))

    @property
    def total_dim(self):
        return int(sum(self.lengths))

    @property
    def offsets(self):
        return self._offsets

    def slices(self):
        """Yield (name, slice) pairs in canonical order."""
        for name, off, length in zip(self.names, self.offsets, self.lengths):
            yield name, slice(off, off + length)

    def digest(self):
        """Stable hex digest of the (name, length) table."""
        text = "\n".join(f"{n}:{l}" for n, l in zip(self.names, self.lengths))
        return hashlib.sha256(text.encode()).hexdigest()


class LayeredVector:
    """An update or parameter vector stored as named layer blocks of float64."""

    __slots__ = ("schema", "data")

    def __init__(self, schema: Schema, data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.shape != (schema.total_dim,):
            raise SchemaError(
                f"data length {data.shape} does not match schema dim {schema.total_dim}"
            )
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):
        raise AttributeError("LayeredVector is immutable")

    @classmethod
    def from_blocks(cls, blocks):
        """Build from an ordered list of (name, 1-D array) pairs."""
        names = tuple(name for name, _ in blocks)
        arrays = [np.asarray(a, dtype=np.float64).ravel() for _, a in blocks]
        schema = Schema(names, tuple(a.size for a in arrays))
        return cls(schema, np.concatenate(arrays) if arrays else np.zeros(0))

    @classmethod
    def zeros(cls, schema):
        return cls(schema, np.zeros(schema.total_dim))

    def block(self, name):
        """Read-only view of one named block."""
        for n, sl in self.schema.slices():
            if n == name:
                return self.data[sl]
        raise KeyError(name)

    def blocks(self):
        return [(name, self.data[sl]) for name, sl in self.schema.slices()]

    def l1_norm(self):
        return float(np.abs(self.data).sum())

    def l2_norm(self):
        return float(np.linalg.norm(self.data))

    def __eq__(self, other):
        return (
            isinstance(other, LayeredVector)
            and self.schema == other.schema
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"LayeredVector(layers={len(self.schema.names)}, dim={self.schema.total_dim})"


@dataclass(frozen=True)
class RoundBatch:
    """The set of client updates submitted for one communication round.

    truth_labels, when present, mark which clients are benign (True). They are
    only available in simulation, never to a deployed aggregator.
    """

    updates: tuple
    client_ids: tuple
    truth_labels: tuple = None

    def __post_init__(self):
        updates = tuple(self.updates)
        object.__setattr__(self, "updates", updates)
        object.__setattr__(self, "client_ids", tuple(self.client_ids))
        if self.truth_labels is not None:
            object.__setattr__(self, "truth_labels", tuple(bool(b) for b in self.truth_labels))
        n = len(updates)
        if n < 2:
            raise UsageError("a round needs at least two client updates")
        if len(self.client_ids) != n:
            raise SchemaError("client_ids length does not match updates")
        schema = updates[0].schema
        if any(u.schema != schema for u in updates[1:]):
            raise SchemaError("all updates in a round must share one schema")
        if self.truth_labels is not None:
            if len(self.truth_labels) != n:
                raise SchemaError("truth_labels length does not match updates")
            if not any(self.truth_labels):
                raise UsageError("at least one client must be benign")

    @property
    def n(self):
        return len(self.updates)

    @property
    def schema(self):
        return self.updates[0].schema

    def matrix(self):
        """Stacked (n, total_dim) float64 matrix of the updates."""
        return np.stack([u.data for u in self.updates])

    def permuted(self, order):
        """Batch with clients reordered by the given index sequence."""
        order = list(order)
        labels = None if self.truth_labels is None else tuple(self.truth_labels[i] for i in order)
        return RoundBatch(
            tuple(self.updates[i] for i in order),
            tuple(self.client_ids[i] for i in order),
            labels,
        )


def axpy(a, x: LayeredVector, y: LayeredVector) -> LayeredVector:
    """Return a*x + y. Schemas must match."""
    if x.schema != y.schema:
        raise SchemaError("axpy operands have different schemas")
    return LayeredVector(x.schema, a * x.data + y.data)


def weighted_sum(batch: RoundBatch, weights) -> LayeredVector:
    """Sum of w_i * x_i over the batch, without renormalizing the weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (batch.n,):
        raise SchemaError(f"expected {batch.n} weights, got {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise UsageError("weights must be finite")
    return LayeredVector(batch.schema, weights @ batch.matrix())


def robust_mean(batch: RoundBatch) -> LayeredVector:
    """Mean over the benign clients only; requires ground-truth labels."""
    if batch.truth_labels is None:
        raise UsageError("robust_mean needs truth labels")
    mask = np.asarray(batch.truth_labels, dtype=bool)
    weights = mask / mask.sum()
    return weighted_sum(batch, weights)


def save_vector(path, vec: LayeredVector):
    """Write a vector to the versioned binary container.

    Layout: magic, u16 version, u32 layer count, then a schema table of
    (u16 name length, utf-8 name, u64 block length) records, then each block
    as little-endian float64.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC_VECTOR)
        fh.write(struct.pack("<HI", _VERSION, len(vec.schema.names)))
        for name, length in zip(vec.schema.names, vec.schema.lengths):
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<Q", length))
        fh.write(np.ascontiguousarray(vec.data, dtype="<f8").tobytes())


def load_vector(path) -> LayeredVector:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_VECTOR:
            raise UsageError(f"{path} is not a layered-vector file")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != _VERSION:
            raise UsageError(f"unsupported vector container version {version}")
        names, lengths = [], []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            names.append(fh.read(name_len).decode())
            lengths.append(struct.unpack("<Q", fh.read(8))[0])
        schema = Schema(tuple(names), tuple(int(l) for l in lengths))
        data = np.frombuffer(fh.read(8 * schema.total_dim), dtype="<f8")
        return LayeredVector(schema, data)
