"""Relation storage: tuples of attributes plus embedding vectors.

The relation is the single source of truth. Every proximity graph in the
system references tuples by primary key; pks are assigned densely in
ingestion order so the primary index is plain array indexing.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Kind",
    "Metric",
    "Schema",
    "Tuple",
    "Relation",
    "ingest_relation",
    "distance",
    "brute_force_topk",
    "recall_at_k",
    "read_fvecs",
    "write_fvecs",
    "read_attributes_csv",
    "write_attributes_csv",
]


class Kind(str, Enum):
    """Attribute column kind. A column holds exactly one kind."""

    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


class Metric(str, Enum):
    """Vector distance. Squared euclidean is the default; it is monotone
    with euclidean so rank comparisons are unaffected."""

    SQEUCLIDEAN = "sqeuclidean"
    NEG_INNER_PRODUCT = "neg_inner_product"


@dataclass(frozen=True)
class Schema:
    """Ordered attribute columns: (name, kind) pairs with unique names."""

    columns: tuple[tuple[str, Kind], ...]

    def __post_init__(self):
        if not self.columns:
            raise ValueError("schema must have at least one column")
        names = [n for n, _ in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in schema: {names}")

    @classmethod
    def of(cls, *cols: tuple[str, str | Kind]) -> "Schema":
        return cls(tuple((n, Kind(k)) for n, k in cols))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.columns)

    def kind_of(self, attr: str) -> Kind:
        for n, k in self.columns:
            if n == attr:
                return k
        raise KeyError(f"unknown attribute {attr!r}")

    def __contains__(self, attr: str) -> bool:
        return any(n == attr for n, _ in self.columns)


@dataclass(frozen=True)
class Tuple:
    """One row: primary key, attribute values in schema order, vector."""

    pk: int
    attrs: tuple[float | str, ...]
    vector: np.ndarray
    schema: Schema = field(repr=False)

    def value(self, attr: str) -> float | str:
        for i, (n, _) in enumerate(self.schema.columns):
            if n == attr:
                return self.attrs[i]
        raise KeyError(f"unknown attribute {attr!r}")

    def __getitem__(self, attr: str) -> float | str:
        return self.value(attr)


class Relation:
    """Immutable collection of tuples with dense primary keys 0..n-1.

    Vectors are stored as one float32 matrix; attribute columns as numpy
    arrays (float64 for numeric, unicode for categorical). All reads are
    safe under concurrency because nothing mutates after ingestion.
    """

    def __init__(
        self,
        schema: Schema,
        vectors: np.ndarray,
        columns: dict[str, np.ndarray],
        metric: Metric = Metric.SQEUCLIDEAN,
    ):
        self.schema = schema
        self.vectors = vectors
        self.columns = columns
        self.metric = metric

    @property
    def card(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.card

    def column(self, attr: str) -> np.ndarray:
        return self.columns[attr]

    def tuple(self, pk: int) -> Tuple:
        if not 0 <= pk < self.card:
            raise KeyError(f"pk {pk} out of range [0, {self.card})")
        attrs = tuple(self.columns[n][pk] for n in self.schema.names)
        attrs = tuple(
            float(v) if self.schema.kind_of(n) is Kind.NUMERIC else str(v)
            for n, v in zip(self.schema.names, attrs)
        )
        return Tuple(pk=pk, attrs=attrs, vector=self.vectors[pk], schema=self.schema)

    def tuples(self) -> Iterable[Tuple]:
        return (self.tuple(pk) for pk in range(self.card))

    def distances_to(self, q: np.ndarray, pks: np.ndarray | None = None) -> np.ndarray:
        """Distances from q to the given pks (all tuples when pks is None)."""
        vecs = self.vectors if pks is None else self.vectors[pks]
        return batch_distance(vecs, q, self.metric)


def distance(a: np.ndarray, b: np.ndarray, metric: Metric = Metric.SQEUCLIDEAN) -> float:
    """Distance between two vectors under the given metric.

    Squared euclidean: sum((a_i - b_i)^2), computed in float64.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"vector length mismatch: {a.shape} vs {b.shape}")
    if metric is Metric.SQEUCLIDEAN:
        d = a.astype(np.float64) - b.astype(np.float64)
        return float(np.dot(d, d))
    return float(-np.dot(a.astype(np.float64), b.astype(np.float64)))


def batch_distance(vecs: np.ndarray, q: np.ndarray, metric: Metric = Metric.SQEUCLIDEAN) -> np.ndarray:
    """Distances from q to each row of vecs, as float64."""
    v = vecs.astype(np.float64, copy=False)
    qq = np.asarray(q, dtype=np.float64)
    if v.shape[1] != qq.shape[0]:
        raise ValueError(f"vector length mismatch: {v.shape[1]} vs {qq.shape[0]}")
    if metric is Metric.SQEUCLIDEAN:
        d = v - qq
        return np.einsum("ij,ij->i", d, d)
    return -(v @ qq)


def ingest_relation(
    schema: Schema,
    vectors: np.ndarray | Sequence[Sequence[float]],
    attrs: Sequence[Sequence[float | str]] | dict[str, Sequence],
    metric: Metric = Metric.SQEUCLIDEAN,
) -> Relation:
    """Build a Relation, assigning dense pks 0..n-1 in source order.

    Rejects empty sources, NaN/infinite vector components, row count
    mismatches between vectors and attributes, and values that do not
    match the declared column kind.
    """
    vecs = np.asarray(vectors, dtype=np.float32)
    if vecs.size == 0:
        raise ValueError("empty relation")
    if vecs.ndim != 2:
        raise ValueError(f"vectors must be 2-D, got shape {vecs.shape}")
    if not np.all(np.isfinite(vecs)):
        raise ValueError("vectors contain NaN or infinite components")
    n = vecs.shape[0]

    if isinstance(attrs, dict):
        col_source = {name: list(values) for name, values in attrs.items()}
        missing = [n_ for n_ in schema.names if n_ not in col_source]
        if missing:
            raise ValueError(f"attribute columns missing: {missing}")
    else:
        rows = [list(r) for r in attrs]
        if any(len(r) != len(schema.columns) for r in rows):
            raise ValueError("attribute row width does not match schema")
        col_source = {
            name: [r[i] for r in rows] for i, name in enumerate(schema.names)
        }

    columns: dict[str, np.ndarray] = {}
    for name, kind in schema.columns:
        values = col_source[name]
        if len(values) != n:
            raise ValueError(
                f"attribute rows ({len(values)}) do not match vector count ({n})"
            )
        if kind is Kind.NUMERIC:
            try:
                col = np.asarray([float(v) for v in values], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"column {name!r} is numeric but holds {exc}") from exc
            if not np.all(np.isfinite(col)):
                raise ValueError(f"column {name!r} contains NaN or infinite values")
        else:
            if any(isinstance(v, (int, float, np.floating, np.integer)) for v in values):
                raise ValueError(f"column {name!r} is categorical but holds numbers")
            col = np.asarray([str(v) for v in values], dtype=np.str_)
        columns[name] = col

    return Relation(schema=schema, vectors=vecs, columns=columns, metric=metric)


def brute_force_topk(r: Relation, q: np.ndarray, k: int, p=None) -> list[tuple[int, float]]:
    """Exact filtered top-k by full scan: the ground-truth oracle.

    Returns the min(k, matches) nearest tuples satisfying p, ordered by
    ascending (distance, pk). p may be None (no filter) or any predicate
    with a matching_mask over the relation.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if p is None:
        pks = np.arange(r.card)
    else:
        from .predicate import matching_mask

        pks = np.nonzero(matching_mask(p, r))[0]
    if pks.size == 0:
        return []
    dists = r.distances_to(np.asarray(q, dtype=np.float32), pks)
    order = np.lexsort((pks, dists))[:k]
    return [(int(pks[i]), float(dists[i])) for i in order]


def recall_at_k(result: Iterable[int], truth: Iterable[int], k: int) -> float:
    """recall@k = |result ∩ truth| / k. Requires |truth| <= k."""
    if k <= 0:
        raise ValueError(f"k must be >= 1, got {k}")
    truth_set = set(truth)
    if len(truth_set) > k:
        raise ValueError(f"truth has {len(truth_set)} entries, more than k={k}")
    return len(set(result) & truth_set) / k


# -- file formats -------------------------------------------------------

def read_fvecs(path: str | Path) -> np.ndarray:
    """Read an fvecs file: per vector, int32 dim then dim float32 values.

    Little-endian; the file length must be exactly n * (4 + 4 * dim).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: too short for an fvecs file")
    dim = struct.unpack("<i", raw[:4])[0]
    if dim <= 0:
        raise ValueError(f"{path}: invalid vector dimension {dim}")
    stride = 4 + 4 * dim
    if len(raw) % stride != 0:
        raise ValueError(
            f"{path}: length {len(raw)} is not a multiple of {stride} (dim {dim})"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, dim + 1)
    dims = arr[:, 0].view("<i4")
    if not np.all(dims == dim):
        raise ValueError(f"{path}: inconsistent per-vector dimensions")
    return np.ascontiguousarray(arr[:, 1:], dtype=np.float32)


def write_fvecs(path: str | Path, vectors: np.ndarray) -> None:
    vecs = np.asarray(vectors, dtype="<f4")
    if vecs.ndim != 2:
        raise ValueError("vectors must be 2-D")
    n, dim = vecs.shape
    out = np.empty((n, dim + 1), dtype="<f4")
    out[:, 0].view("<i4")[:] = dim
    out[:, 1:] = vecs
    Path(path).write_bytes(out.tobytes())


def read_attributes_csv(
    path: str | Path, schema: Schema | None = None
) -> tuple[Schema, dict[str, list]]:
    """Read the attribute CSV: header row of names, one row per vector.

    Without an explicit schema, a column is numeric when every value
    parses as a decimal real, otherwise categorical.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty attribute file") from None
        rows = [row for row in reader]
    if any(len(row) != len(header) for row in rows):
        raise ValueError(f"{path}: ragged rows in attribute file")

    raw = {name: [row[i] for row in rows] for i, name in enumerate(header)}
    if schema is None:
        cols = []
        for name in header:
            kind = Kind.NUMERIC
            for v in raw[name]:
                try:
                    float(v)
                except ValueError:
                    kind = Kind.CATEGORICAL
                    break
            cols.append((name, kind))
        schema = Schema(tuple(cols))
    else:
        if list(schema.names) != header:
            raise ValueError(
                f"{path}: header {header} does not match schema {list(schema.names)}"
            )

    columns: dict[str, list] = {}
    for name, kind in schema.columns:
        if kind is Kind.NUMERIC:
            columns[name] = [float(v) for v in raw[name]]
        else:
            columns[name] = list(raw[name])
    return schema, columns


def write_attributes_csv(path: str | Path, relation: Relation) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(relation.schema.names)
        cols = [relation.columns[n] for n in relation.schema.names]
        kinds = [relation.schema.kind_of(n) for n in relation.schema.names]
        for i in range(relation.card):
            writer.writerow(
                [
                    repr(float(c[i])) if k is Kind.NUMERIC else str(c[i])
                    for c, k in zip(cols, kinds)
                ]
            )
