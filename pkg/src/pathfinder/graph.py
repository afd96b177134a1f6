"""Vamana proximity graphs: construction, best-first search, and the
out-of-range search variant used for filtered queries.

A graph lives over a subset of relation primary keys. Construction is
the standard recipe: a random bounded-degree start, then two passes of
greedy search plus robust pruning per vertex (slack 1.0 first, then the
configured prune_alpha), inserting reverse edges and re-pruning on
overflow. The entry point is the medoid of the members.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .data import Metric, Relation
from .predicate import matching_mask

__all__ = [
    "BuildParams",
    "SearchParams",
    "VamanaGraph",
    "SearchOutcome",
    "build_vamana",
    "robust_prune",
    "best_first_search",
    "oor_search",
    "search_graph",
    "save_graph",
    "load_graph",
]

_MAGIC = b"PFGR"
_VERSION = 1


@dataclass(frozen=True)
class BuildParams:
    """Graph construction knobs: max degree R, construction queue length,
    and the robust-pruning slack (applied in euclidean space)."""

    R: int = 32
    L_build: int = 128
    prune_alpha: float = 1.2

    def __post_init__(self):
        if self.R < 2:
            raise ValueError(f"R must be >= 2, got {self.R}")
        if self.L_build < self.R:
            raise ValueError(f"L_build ({self.L_build}) must be >= R ({self.R})")
        if self.prune_alpha < 1.0:
            raise ValueError(f"prune_alpha must be >= 1, got {self.prune_alpha}")


@dataclass(frozen=True)
class SearchParams:
    """Search queue length L and result count K, with L >= K >= 1."""

    L: int
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.L < self.K:
            raise ValueError(f"L ({self.L}) must be >= K ({self.K})")


@dataclass
class VamanaGraph:
    """Bounded-degree proximity graph over a sorted pk subset.

    Adjacency is stored with local member indices (-1 padding) next to a
    degree array; the entry point is a member pk. Immutable after build.
    """

    members: np.ndarray
    adj: np.ndarray
    deg: np.ndarray
    entry: int
    R: int

    @property
    def card(self) -> int:
        return int(self.members.shape[0])

    @property
    def entry_local(self) -> int:
        i = int(np.searchsorted(self.members, self.entry))
        if i >= self.card or self.members[i] != self.entry:
            raise ValueError(f"entry pk {self.entry} is not a member")
        return i

    def local_of(self, pk: int) -> int:
        i = int(np.searchsorted(self.members, pk))
        if i >= self.card or self.members[i] != pk:
            raise KeyError(f"pk {pk} is not a member of this graph")
        return i

    def neighbors_of(self, pk: int) -> np.ndarray:
        """Neighbor pks of one member."""
        i = self.local_of(pk)
        return self.members[self.adj[i, : self.deg[i]]]

    def validate(self) -> None:
        """Check structural invariants; raises AssertionError on breakage."""
        assert self.members.ndim == 1 and np.all(np.diff(self.members) > 0), "members must be sorted unique"
        assert self.adj.shape == (self.card, self.R)
        assert self.deg.shape == (self.card,)
        assert np.all(self.deg <= self.R), "degree bound violated"
        for i in range(self.card):
            row = self.adj[i, : self.deg[i]]
            assert np.all((row >= 0) & (row < self.card)), "neighbor out of range"
        assert self.entry in self.members

    @classmethod
    def from_pk_adjacency(
        cls, members, adjacency: dict[int, list[int]], entry: int, R: int
    ) -> "VamanaGraph":
        """Build a graph object from explicit pk adjacency lists."""
        mem = np.asarray(sorted(members), dtype=np.int64)
        m = mem.shape[0]
        adj = np.full((m, R), -1, dtype=np.int32)
        deg = np.zeros(m, dtype=np.int32)
        lookup = {int(pk): i for i, pk in enumerate(mem)}
        for pk, neigh in adjacency.items():
            if len(neigh) > R:
                raise ValueError(f"pk {pk} has {len(neigh)} neighbors, more than R={R}")
            i = lookup[int(pk)]
            for k, npk in enumerate(neigh):
                adj[i, k] = lookup[int(npk)]
            deg[i] = len(neigh)
        g = cls(members=mem, adj=adj, deg=deg, entry=int(entry), R=R)
        g.validate()
        return g


@dataclass
class SearchOutcome:
    """Hits plus the instrumentation the executor and tests rely on."""

    pks: np.ndarray
    dists: np.ndarray
    n_evaluated: int
    expanded_pks: np.ndarray

    @property
    def hits(self) -> list[tuple[int, float]]:
        return [(int(p), float(d)) for p, d in zip(self.pks, self.dists)]


def _metric_code(metric: Metric) -> int:
    return (
        _kernels.METRIC_SQEUCLIDEAN
        if metric is Metric.SQEUCLIDEAN
        else _kernels.METRIC_NEG_INNER
    )


def _prune_factor(alpha: float, metric: Metric) -> float:
    # The pruning slack is defined on euclidean distances; on squared
    # distances the equivalent factor is alpha^2.
    return alpha * alpha if metric is Metric.SQEUCLIDEAN else alpha


def _medoid(vectors: np.ndarray, members: np.ndarray, rng: np.random.Generator) -> int:
    """Member pk minimizing total distance to a sample of members (the
    whole member set when it is 1000 or smaller)."""
    m = members.shape[0]
    if m <= 1000:
        sample = members
    else:
        sample = rng.choice(members, size=1000, replace=False)
    sub = vectors[sample].astype(np.float64)
    mem = vectors[members].astype(np.float64)
    sq = np.einsum("ij,ij->i", mem, mem)
    totals = sample.shape[0] * sq - 2.0 * (mem @ sub.sum(axis=0)) + np.einsum("ij,ij->", sub, sub)
    return int(members[int(np.argmin(totals))])


def _random_adjacency(m: int, R: int, rng: np.random.Generator) -> np.ndarray:
    """Random start graph: R ids per vertex, self-loops shifted away.
    Duplicates are tolerated; the first pruning pass removes them."""
    if m == 1:
        return np.full((1, R), -1, dtype=np.int32)
    cand = rng.integers(0, m - 1, size=(m, R), dtype=np.int64)
    rows = np.arange(m, dtype=np.int64)[:, None]
    cand[cand >= rows] += 1
    return cand.astype(np.int32)


def _reachable(adj: np.ndarray, deg: np.ndarray, entry_local: int) -> np.ndarray:
    m = adj.shape[0]
    reached = np.zeros(m, dtype=bool)
    reached[entry_local] = True
    frontier = [entry_local]
    while frontier:
        nxt = []
        for v in frontier:
            for u in adj[v, : deg[v]]:
                if not reached[u]:
                    reached[u] = True
                    nxt.append(int(u))
        frontier = nxt
    return reached


def _repair_connectivity(
    vectors: np.ndarray, members: np.ndarray, adj: np.ndarray, deg: np.ndarray,
    entry_local: int, R: int, metric: Metric,
) -> None:
    """Attach any vertex unreachable from the entry point.

    Each round links the smallest unreached vertex from its nearest
    reached vertex, preferring one with a spare degree slot and otherwise
    evicting the farthest neighbor. Deterministic; keeps the degree bound.
    """
    from .data import batch_distance

    m = adj.shape[0]
    for _ in range(4 * m):
        reached = _reachable(adj, deg, entry_local)
        missing = np.nonzero(~reached)[0]
        if missing.size == 0:
            return
        u = int(missing[0])
        reached_ids = np.nonzero(reached)[0]
        d = batch_distance(vectors[members[reached_ids]], vectors[members[u]], metric)
        order = reached_ids[np.lexsort((reached_ids, d))]
        w = None
        for cand in order:
            if deg[cand] < R:
                w = int(cand)
                break
        if w is not None:
            adj[w, deg[w]] = u
            deg[w] += 1
        else:
            # no spare slot anywhere: evict the farthest neighbor of the
            # nearest reached vertex
            w = int(order[0])
            neigh = adj[w, : deg[w]]
            nd = batch_distance(vectors[members[neigh]], vectors[members[w]], metric)
            adj[w, int(np.lexsort((neigh, nd))[-1])] = u
    raise RuntimeError("connectivity repair did not converge")


def build_vamana(r: Relation, members, bp: BuildParams, seed: int) -> VamanaGraph:
    """Build a Vamana graph over the given member pks, deterministically
    for a fixed seed."""
    mem = np.unique(np.asarray(list(members) if not isinstance(members, np.ndarray) else members, dtype=np.int64))
    if mem.size == 0:
        raise ValueError("empty member set")
    if mem[0] < 0 or mem[-1] >= r.card:
        raise ValueError("member pk out of relation range")

    rng = np.random.default_rng(seed)
    entry = _medoid(r.vectors, mem, rng)
    m = mem.shape[0]
    if m == 1:
        return VamanaGraph(
            members=mem,
            adj=np.full((1, bp.R), -1, dtype=np.int32),
            deg=np.zeros(1, dtype=np.int32),
            entry=entry,
            R=bp.R,
        )

    adj = _random_adjacency(m, bp.R, rng)
    deg = np.full(m, min(bp.R, m - 1), dtype=np.int32)
    entry_local = int(np.searchsorted(mem, entry))
    code = _metric_code(r.metric)
    for alpha in (1.0, bp.prune_alpha):
        _kernels.build_pass_kernel(
            r.vectors, mem, adj, deg, entry_local,
            bp.L_build, _prune_factor(alpha, r.metric), code,
        )
    _repair_connectivity(r.vectors, mem, adj, deg, entry_local, bp.R, r.metric)
    return VamanaGraph(members=mem, adj=adj, deg=deg, entry=entry, R=bp.R)


def robust_prune(
    r: Relation, v: int, candidates: list[tuple[int, float]], bp: BuildParams
) -> list[int]:
    """Prune a candidate neighbor list for vertex v down to at most R pks.

    Candidates are (pk, distance-to-v) pairs and must not include v. The
    closest candidate is always kept first.
    """
    if not candidates:
        return []
    if any(pk == v for pk, _ in candidates):
        raise ValueError("candidates must exclude the vertex itself")
    all_pks = np.arange(r.card, dtype=np.int64)
    cand_ids = np.asarray([pk for pk, _ in candidates], dtype=np.int64)
    cand_d = np.asarray([d for _, d in candidates], dtype=np.float64)
    out = np.empty(bp.R, dtype=np.int64)
    kept = _kernels.prune_kernel(
        r.vectors, all_pks, cand_ids, cand_d, cand_ids.shape[0],
        np.int64(v), _prune_factor(bp.prune_alpha, r.metric), bp.R,
        _metric_code(r.metric), out,
    )
    return [int(p) for p in out[:kept]]


def search_graph(
    g: VamanaGraph,
    r: Relation,
    q: np.ndarray,
    sp: SearchParams,
    mask: np.ndarray | None = None,
) -> SearchOutcome:
    """Run the bounded best-first traversal; with a mask, only passing
    members are collected while navigation ignores the mask entirely."""
    if g.card == 0:
        raise ValueError("graph is empty")
    qv = np.ascontiguousarray(np.asarray(q, dtype=np.float32))
    if qv.shape != (r.dim,):
        raise ValueError(f"query dim {qv.shape} does not match relation dim {r.dim}")
    use_mask = mask is not None
    m = mask if use_mask else np.zeros(0, dtype=bool)
    res_i, res_d, n_res, n_eval, expanded, n_exp = _kernels.search_kernel(
        r.vectors, g.members, g.adj, g.deg, g.entry_local,
        qv, sp.L, sp.K, m, use_mask, _metric_code(r.metric),
    )
    return SearchOutcome(
        pks=g.members[res_i[:n_res]],
        dists=res_d[:n_res],
        n_evaluated=int(n_eval),
        expanded_pks=g.members[expanded[:n_exp]],
    )


def best_first_search(
    g: VamanaGraph, r: Relation, q: np.ndarray, sp: SearchParams
) -> list[tuple[int, float]]:
    """Plain top-K best-first search over the graph members."""
    return search_graph(g, r, q, sp).hits


def oor_search(
    g: VamanaGraph, r: Relation, q: np.ndarray, sp: SearchParams, p
) -> list[tuple[int, float]]:
    """Out-of-range search: navigate the whole graph but return only
    members satisfying the predicate."""
    return search_graph(g, r, q, sp, mask=matching_mask(p, r)).hits


# -- serialization --------------------------------------------------------

def save_graph(g: VamanaGraph, path: str | Path) -> None:
    """Versioned little-endian binary layout; round-trips byte-identically."""
    parts = [
        _MAGIC,
        struct.pack("<IIQQ", _VERSION, g.R, g.card, g.entry),
        g.members.astype("<u8").tobytes(),
    ]
    for i in range(g.card):
        row = g.members[g.adj[i, : g.deg[i]]].astype("<u8")
        parts.append(struct.pack("<I", int(g.deg[i])))
        parts.append(row.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_graph(path: str | Path) -> VamanaGraph:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a graph file")
    version, R, card, entry = struct.unpack_from("<IIQQ", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported graph version {version}")
    off = 4 + 24
    members = np.frombuffer(raw, dtype="<u8", count=card, offset=off).astype(np.int64)
    off += 8 * card
    adj = np.full((card, R), -1, dtype=np.int32)
    deg = np.zeros(card, dtype=np.int32)
    for i in range(card):
        (d,) = struct.unpack_from("<I", raw, off)
        off += 4
        row = np.frombuffer(raw, dtype="<u8", count=d, offset=off).astype(np.int64)
        off += 8 * d
        adj[i, :d] = np.searchsorted(members, row)
        deg[i] = d
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in graph file")
    return VamanaGraph(members=members, adj=adj, deg=deg, entry=int(entry), R=int(R))
