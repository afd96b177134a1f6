"""Attribute-specific graph indexes and the index catalog.

A tree index recursively partitions a numeric attribute into
equal-cardinality subranges (duplicated boundary values all go left) and
builds one proximity graph per node. A hash index maps each category of
a categorical attribute to one leaf graph. Every index shares the single
full-relation root graph as its top layer, so the catalog is a forest
hanging off one common root.

Each node also records, per attribute, the range of values its members
take (min/max for numeric attributes, the value set for categorical
ones). Those summaries are what predicate synthesis consumes when an
index is borrowed for a filter on a correlated, unindexed attribute.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    Kind,
    Metric,
    Relation,
    Schema,
    ingest_relation,
    read_attributes_csv,
    read_fvecs,
    write_attributes_csv,
    write_fvecs,
)
from .graph import BuildParams, VamanaGraph, build_vamana, load_graph, save_graph
from .predicate import InSet, MatchAll, NodePredicate, Range

__all__ = [
    "NumericSpan",
    "ValueSet",
    "IndexNode",
    "AttributeIndex",
    "TreeIndex",
    "HashIndex",
    "IndexCatalog",
    "IndexSpec",
    "tree_partition",
    "build_tree_index",
    "build_hash_index",
    "build_catalog",
    "compute_attr_ranges",
    "compute_correlations",
    "save_catalog",
    "load_catalog",
    "derive_seed",
]

ROOT_ID = "root"
_MANIFEST_VERSION = 1


# -- per-node attribute summaries -----------------------------------------

@dataclass(frozen=True)
class NumericSpan:
    """Observed [min, max] of a numeric attribute over a node's members."""

    min: float
    max: float

    def overlaps_atom(self, atom: Range) -> bool:
        if atom.lower is not None:
            if self.max < atom.lower or (self.max == atom.lower and not atom.lower_inclusive):
                return False
        if atom.upper is not None:
            if self.min > atom.upper or (self.min == atom.upper and not atom.upper_inclusive):
                return False
        return True

    def contains(self, other: "NumericSpan") -> bool:
        return self.min <= other.min and self.max >= other.max


@dataclass(frozen=True)
class ValueSet:
    """Observed category set of a categorical attribute over a node."""

    values: frozenset[str]

    def overlaps_atom(self, atom: InSet) -> bool:
        return bool(self.values & atom.values)

    def contains(self, other: "ValueSet") -> bool:
        return other.values <= self.values


AttrSummary = NumericSpan | ValueSet


# -- nodes and indexes -----------------------------------------------------

@dataclass
class IndexNode:
    """One index node: a predicate region, its proximity graph, child
    links, and per-attribute value summaries."""

    node_id: str
    predicate: NodePredicate
    graph: VamanaGraph
    children: tuple[str, ...] = ()
    attr_ranges: dict[str, AttrSummary] = field(default_factory=dict)

    @property
    def card(self) -> int:
        return self.graph.card

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __repr__(self) -> str:
        return f"IndexNode({self.node_id}, card={self.card})"


class AttributeIndex:
    """Shared shape of tree and hash indexes: a node table rooted at the
    common full-relation graph."""

    kind = "base"

    def __init__(self, attr: str, nodes: dict[str, IndexNode], layers: list[list[str]]):
        self.attr = attr
        self.nodes = nodes
        self.layers = layers

    @property
    def index_id(self) -> str:
        return f"{self.kind}:{self.attr}"

    @property
    def root(self) -> IndexNode:
        return self.nodes[ROOT_ID]

    def node(self, node_id: str) -> IndexNode:
        return self.nodes[node_id]

    def children_of(self, node: IndexNode) -> list[IndexNode]:
        return [self.nodes[c] for c in node.children]

    def leaf_ids(self) -> list[str]:
        return list(self.layers[-1])

    def non_leaves_bottom_up(self) -> list[IndexNode]:
        out = []
        for layer in reversed(self.layers[:-1]):
            out.extend(self.nodes[i] for i in layer)
        return out

    def all_nodes(self) -> list[IndexNode]:
        return [self.nodes[i] for layer in self.layers for i in layer]


class TreeIndex(AttributeIndex):
    kind = "tree"

    def __init__(self, attr, nodes, layers, fanout: int, height: int):
        super().__init__(attr, nodes, layers)
        self.fanout = fanout
        self.height = height


class HashIndex(AttributeIndex):
    kind = "hash"

    def __init__(self, attr, nodes, layers, leaves: dict[str, str]):
        super().__init__(attr, nodes, layers)
        self.leaves = leaves  # category -> node id


@dataclass
class IndexCatalog:
    """Everything the planner and executor need: the relation, the shared
    root node, per-attribute indexes, and the correlation table."""

    relation: Relation
    root: IndexNode
    indexes: dict[str, AttributeIndex]
    correlations: dict[tuple[str, str], float] = field(default_factory=dict)

    @property
    def root_graph(self) -> VamanaGraph:
        return self.root.graph

    def index_for(self, attr: str) -> AttributeIndex | None:
        return self.indexes.get(attr)

    def correlation(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        return self.correlations.get((min(a, b), max(a, b)), 0.0)

    def all_nodes(self) -> list[tuple[str, IndexNode]]:
        """(index_id, node) pairs for the root and every index node."""
        out = [(ROOT_ID, self.root)]
        for attr in sorted(self.indexes):
            idx = self.indexes[attr]
            for layer in idx.layers[1:]:
                out.extend((idx.index_id, idx.nodes[i]) for i in layer)
        return out


def derive_seed(master_seed: int, label: str) -> int:
    """Stable per-node seed so graph builds are order- and
    thread-independent."""
    return (int(master_seed) * 1_000_003 + zlib.crc32(label.encode())) & 0xFFFFFFFF


# -- tree partitioning ----------------------------------------------------

def tree_partition(values: np.ndarray, fanout: int, height: int):
    """Split a numeric column into the tree layout without building graphs.

    Returns (layers, children) where layers[k] is a list of
    (member_pks_sorted, lower, upper) with (lower, upper] regions, and
    children maps (layer, pos) to the child position range at layer+1.
    Splits are equal-cardinality; duplicates of a boundary value all stay
    on the left side.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if fanout < 2:
        raise ValueError(f"fanout must be >= 2, got {fanout}")
    if height < 2:
        raise ValueError(f"height must be >= 2, got {height}")
    if fanout ** (height - 1) > n:
        raise ValueError(
            f"too many layers for the data: {fanout}^{height - 1} leaves > {n} tuples"
        )
    order = np.lexsort((np.arange(n), values))
    sorted_vals = values[order]

    spans = [[(0, n, None, None)]]
    for _ in range(1, height):
        nxt = []
        for s, e, lo, hi in spans[-1]:
            m = e - s
            prev_cut, prev_lo = s, lo
            for j in range(1, fanout):
                pos = s + int(round(m * j / fanout))
                if pos <= prev_cut or pos >= e:
                    raise ValueError("too many layers for the data: empty split")
                bval = float(sorted_vals[pos - 1])
                cut = s + int(np.searchsorted(sorted_vals[s:e], bval, side="right"))
                if cut <= prev_cut or cut >= e:
                    raise ValueError(
                        "too many layers for the data: duplicate values prevent an equal split"
                    )
                nxt.append((prev_cut, cut, prev_lo, bval))
                prev_cut, prev_lo = cut, bval
            nxt.append((prev_cut, e, prev_lo, hi))
        spans.append(nxt)

    layers = [
        [(np.sort(order[s:e]), lo, hi) for s, e, lo, hi in layer]
        for layer in spans
    ]
    return layers


def _bounds_to_predicate(attr: str, lo, hi) -> NodePredicate:
    if lo is None and hi is None:
        return MatchAll()
    return Range(
        attr,
        lower=lo,
        lower_inclusive=False if lo is not None else True,
        upper=hi,
        upper_inclusive=True,
    )


def _build_graphs(
    r: Relation, jobs: list[tuple[str, np.ndarray]], bp: BuildParams, seed: int, threads: int
) -> dict[str, VamanaGraph]:
    def one(job):
        node_id, members = job
        return node_id, build_vamana(r, members, bp, derive_seed(seed, node_id))

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return dict(ex.map(one, jobs))
    return dict(one(j) for j in jobs)


def _root_node(r: Relation, bp: BuildParams, seed: int, root_graph: VamanaGraph | None) -> VamanaGraph:
    if root_graph is None:
        root_graph = build_vamana(r, np.arange(r.card), bp, derive_seed(seed, ROOT_ID))
    return root_graph


def build_tree_index(
    r: Relation,
    attr: str,
    fanout: int,
    height: int,
    bp: BuildParams,
    seed: int,
    root_graph: VamanaGraph | None = None,
    threads: int = 1,
) -> TreeIndex:
    """Build the tree index for a numeric attribute. The root layer
    aliases the shared full-relation graph instead of rebuilding it."""
    if r.schema.kind_of(attr) is not Kind.NUMERIC:
        raise ValueError(f"tree index needs a numeric attribute, {attr!r} is categorical")
    layout = tree_partition(r.column(attr), fanout, height)
    root_graph = _root_node(r, bp, seed, root_graph)

    jobs: list[tuple[str, np.ndarray]] = []
    for layer_no, layer in enumerate(layout[1:], start=1):
        for pos, (members, _, _) in enumerate(layer):
            jobs.append((f"{attr}.L{layer_no}.{pos}", members))
    graphs = _build_graphs(r, jobs, bp, seed, threads)

    nodes: dict[str, IndexNode] = {}
    layer_ids: list[list[str]] = [[ROOT_ID]]
    for layer_no, layer in enumerate(layout[1:], start=1):
        ids = []
        for pos, (members, lo, hi) in enumerate(layer):
            node_id = f"{attr}.L{layer_no}.{pos}"
            children = ()
            if layer_no < height - 1:
                children = tuple(
                    f"{attr}.L{layer_no + 1}.{pos * fanout + j}" for j in range(fanout)
                )
            nodes[node_id] = IndexNode(
                node_id=node_id,
                predicate=_bounds_to_predicate(attr, lo, hi),
                graph=graphs[node_id],
                children=children,
            )
            ids.append(node_id)
        layer_ids.append(ids)

    nodes[ROOT_ID] = IndexNode(
        node_id=ROOT_ID,
        predicate=MatchAll(),
        graph=root_graph,
        children=tuple(layer_ids[1]),
    )
    return TreeIndex(attr, nodes, layer_ids, fanout=fanout, height=height)


def build_hash_index(
    r: Relation,
    attr: str,
    bp: BuildParams,
    seed: int,
    root_graph: VamanaGraph | None = None,
    threads: int = 1,
) -> HashIndex:
    """Build the hash index for a categorical attribute: one leaf graph
    per distinct value, all hanging off the shared root."""
    if r.schema.kind_of(attr) is not Kind.CATEGORICAL:
        raise ValueError(f"hash index needs a categorical attribute, {attr!r} is numeric")
    col = r.column(attr)
    categories = [str(c) for c in np.unique(col)]
    root_graph = _root_node(r, bp, seed, root_graph)

    jobs = [
        (f"{attr}={cat}", np.nonzero(col == cat)[0].astype(np.int64)) for cat in categories
    ]
    graphs = _build_graphs(r, jobs, bp, seed, threads)

    nodes: dict[str, IndexNode] = {}
    leaves: dict[str, str] = {}
    leaf_ids = []
    for cat in categories:
        node_id = f"{attr}={cat}"
        nodes[node_id] = IndexNode(
            node_id=node_id,
            predicate=InSet(attr, frozenset({cat})),
            graph=graphs[node_id],
        )
        leaves[cat] = node_id
        leaf_ids.append(node_id)
    nodes[ROOT_ID] = IndexNode(
        node_id=ROOT_ID, predicate=MatchAll(), graph=root_graph, children=tuple(leaf_ids)
    )
    return HashIndex(attr, nodes, [[ROOT_ID], leaf_ids], leaves=leaves)


@dataclass(frozen=True)
class IndexSpec:
    """What to build for one attribute: tree:<attr>:<fanout>:<height> or
    hash:<attr>."""

    kind: str
    attr: str
    fanout: int = 2
    height: int = 5

    @classmethod
    def parse(cls, text: str) -> "IndexSpec":
        parts = text.split(":")
        if parts[0] == "tree":
            if len(parts) != 4:
                raise ValueError(f"tree index spec must be tree:<attr>:<fanout>:<height>, got {text!r}")
            return cls("tree", parts[1], fanout=int(parts[2]), height=int(parts[3]))
        if parts[0] == "hash":
            if len(parts) != 2:
                raise ValueError(f"hash index spec must be hash:<attr>, got {text!r}")
            return cls("hash", parts[1])
        raise ValueError(f"unknown index kind in {text!r}")

    def __str__(self) -> str:
        if self.kind == "tree":
            return f"tree:{self.attr}:{self.fanout}:{self.height}"
        return f"hash:{self.attr}"


def build_catalog(
    r: Relation,
    specs: list[IndexSpec],
    bp: BuildParams = BuildParams(),
    seed: int = 0,
    threads: int = 1,
) -> IndexCatalog:
    """Build the shared root graph, every requested index, attribute
    summaries, and the correlation table."""
    attrs = [s.attr for s in specs]
    if len(set(attrs)) != len(attrs):
        raise ValueError(f"multiple indexes requested for one attribute: {attrs}")
    root_graph = build_vamana(r, np.arange(r.card), bp, derive_seed(seed, ROOT_ID))
    indexes: dict[str, AttributeIndex] = {}
    for spec in specs:
        if spec.kind == "tree":
            indexes[spec.attr] = build_tree_index(
                r, spec.attr, spec.fanout, spec.height, bp, seed,
                root_graph=root_graph, threads=threads,
            )
        else:
            indexes[spec.attr] = build_hash_index(
                r, spec.attr, bp, seed, root_graph=root_graph, threads=threads
            )
    root = IndexNode(node_id=ROOT_ID, predicate=MatchAll(), graph=root_graph)
    catalog = IndexCatalog(
        relation=r,
        root=root,
        indexes=indexes,
        correlations=compute_correlations(r) if len(r.schema.columns) >= 2 else {},
    )
    compute_attr_ranges(catalog)
    return catalog


# -- attribute summaries and correlations ---------------------------------

def _summaries_for(r: Relation, members: np.ndarray) -> dict[str, AttrSummary]:
    out: dict[str, AttrSummary] = {}
    for name, kind in r.schema.columns:
        col = r.column(name)[members]
        if kind is Kind.NUMERIC:
            out[name] = NumericSpan(min=float(col.min()), max=float(col.max()))
        else:
            out[name] = ValueSet(frozenset(str(v) for v in np.unique(col)))
    return out


def compute_attr_ranges(catalog: IndexCatalog) -> None:
    """Fill every node's per-attribute value summaries from the data."""
    r = catalog.relation
    catalog.root.attr_ranges = _summaries_for(r, catalog.root.graph.members)
    for idx in catalog.indexes.values():
        for node in idx.all_nodes():
            if node.node_id == ROOT_ID:
                node.attr_ranges = catalog.root.attr_ranges
            else:
                node.attr_ranges = _summaries_for(r, node.graph.members)


def _pearson_abs(x: np.ndarray, y: np.ndarray) -> float:
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(abs(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)))


def _correlation_ratio(x: np.ndarray, groups: np.ndarray) -> float:
    """Between-group variance over total variance of x grouped by category."""
    total = np.var(x)
    if total == 0.0:
        return 0.0
    between = 0.0
    mean = x.mean()
    for g in np.unique(groups):
        sel = x[groups == g]
        between += sel.size * (sel.mean() - mean) ** 2
    return float(between / (x.size * total))


def compute_correlations(r: Relation) -> dict[tuple[str, str], float]:
    """Symmetric correlation scores in [0, 1] for every attribute pair:
    |Pearson| for numeric pairs, correlation ratio for numeric vs
    categorical, and 0 for categorical pairs."""
    names = list(r.schema.names)
    if len(names) < 2:
        raise ValueError("correlations need at least two attributes")
    out: dict[tuple[str, str], float] = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            ka, kb = r.schema.kind_of(a), r.schema.kind_of(b)
            if ka is Kind.NUMERIC and kb is Kind.NUMERIC:
                score = _pearson_abs(r.column(a), r.column(b))
            elif ka is Kind.CATEGORICAL and kb is Kind.CATEGORICAL:
                score = 0.0
            else:
                num, cat = (a, b) if ka is Kind.NUMERIC else (b, a)
                score = _correlation_ratio(r.column(num), r.column(cat))
            out[(min(a, b), max(a, b))] = score
    return out


# -- catalog serialization -------------------------------------------------

def _summary_to_json(s: AttrSummary):
    if isinstance(s, NumericSpan):
        return {"min": s.min, "max": s.max}
    return {"values": sorted(s.values)}


def _summary_from_json(obj) -> AttrSummary:
    if "values" in obj:
        return ValueSet(frozenset(obj["values"]))
    return NumericSpan(min=obj["min"], max=obj["max"])


def _predicate_to_json(p: NodePredicate):
    if isinstance(p, MatchAll):
        return {"kind": "all"}
    if isinstance(p, Range):
        return {
            "kind": "range",
            "attr": p.attr,
            "lower": p.lower,
            "lower_inclusive": p.lower_inclusive,
            "upper": p.upper,
            "upper_inclusive": p.upper_inclusive,
        }
    return {"kind": "inset", "attr": p.attr, "values": sorted(p.values)}


def _predicate_from_json(obj) -> NodePredicate:
    if obj["kind"] == "all":
        return MatchAll()
    if obj["kind"] == "range":
        return Range(
            obj["attr"],
            lower=obj["lower"],
            lower_inclusive=obj["lower_inclusive"],
            upper=obj["upper"],
            upper_inclusive=obj["upper_inclusive"],
        )
    return InSet(obj["attr"], frozenset(obj["values"]))


def save_catalog(catalog: IndexCatalog, out_dir: str | Path) -> None:
    """Write the catalog: a text manifest, the relation data files, and
    one binary graph file per node (the root graph saved once)."""
    out = Path(out_dir)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    r = catalog.relation
    write_fvecs(out / "vectors.fvecs", r.vectors)
    write_attributes_csv(out / "attributes.csv", r)

    save_graph(catalog.root.graph, out / "graphs" / "root.bin")
    manifest = {
        "format_version": _MANIFEST_VERSION,
        "metric": r.metric.value,
        "count": r.card,
        "dim": r.dim,
        "schema": [[n, k.value] for n, k in r.schema.columns],
        "data": {"vectors": "vectors.fvecs", "attributes": "attributes.csv"},
        "root": {
            "graph": "graphs/root.bin",
            "card": catalog.root.card,
            "attr_ranges": {
                a: _summary_to_json(s) for a, s in sorted(catalog.root.attr_ranges.items())
            },
        },
        "correlations": {f"{a}|{b}": v for (a, b), v in sorted(catalog.correlations.items())},
        "indexes": [],
    }
    graph_no = 0
    for attr in sorted(catalog.indexes):
        idx = catalog.indexes[attr]
        entry = {"kind": idx.kind, "attr": idx.attr, "layers": idx.layers, "nodes": []}
        if isinstance(idx, TreeIndex):
            entry["fanout"] = idx.fanout
            entry["height"] = idx.height
        if isinstance(idx, HashIndex):
            entry["leaves"] = dict(sorted(idx.leaves.items()))
        for layer in idx.layers:
            for node_id in layer:
                node = idx.nodes[node_id]
                if node_id == ROOT_ID:
                    graph_file = "graphs/root.bin"
                else:
                    graph_file = f"graphs/{graph_no:05d}.bin"
                    graph_no += 1
                    save_graph(node.graph, out / graph_file)
                entry["nodes"].append(
                    {
                        "id": node_id,
                        "predicate": _predicate_to_json(node.predicate),
                        "card": node.card,
                        "children": list(node.children),
                        "attr_ranges": {
                            a: _summary_to_json(s) for a, s in sorted(node.attr_ranges.items())
                        },
                        "graph": graph_file,
                    }
                )
        manifest["indexes"].append(entry)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )


def load_catalog(path: str | Path) -> IndexCatalog:
    base = Path(path)
    manifest = json.loads((base / "manifest.json").read_text())
    if manifest["format_version"] != _MANIFEST_VERSION:
        raise ValueError(f"unsupported catalog version {manifest['format_version']}")
    schema = Schema(tuple((n, Kind(k)) for n, k in manifest["schema"]))
    vectors = read_fvecs(base / manifest["data"]["vectors"])
    _, columns = read_attributes_csv(base / manifest["data"]["attributes"], schema)
    r = ingest_relation(schema, vectors, columns, metric=Metric(manifest["metric"]))
    if r.card != manifest["count"] or r.dim != manifest["dim"]:
        raise ValueError("catalog data files do not match the manifest")

    root_graph = load_graph(base / manifest["root"]["graph"])
    root = IndexNode(
        node_id=ROOT_ID,
        predicate=MatchAll(),
        graph=root_graph,
        attr_ranges={
            a: _summary_from_json(s) for a, s in manifest["root"]["attr_ranges"].items()
        },
    )
    indexes: dict[str, AttributeIndex] = {}
    for entry in manifest["indexes"]:
        nodes: dict[str, IndexNode] = {}
        for node_obj in entry["nodes"]:
            node_id = node_obj["id"]
            graph = root_graph if node_obj["graph"] == "graphs/root.bin" else load_graph(base / node_obj["graph"])
            nodes[node_id] = IndexNode(
                node_id=node_id,
                predicate=_predicate_from_json(node_obj["predicate"]),
                graph=graph,
                children=tuple(node_obj["children"]),
                attr_ranges={
                    a: _summary_from_json(s) for a, s in node_obj["attr_ranges"].items()
                },
            )
        layers = [list(l) for l in entry["layers"]]
        if entry["kind"] == "tree":
            indexes[entry["attr"]] = TreeIndex(
                entry["attr"], nodes, layers, fanout=entry["fanout"], height=entry["height"]
            )
        else:
            indexes[entry["attr"]] = HashIndex(
                entry["attr"], nodes, layers, leaves=dict(entry["leaves"])
            )
    correlations = {
        tuple(k.split("|")): v for k, v in manifest["correlations"].items()
    }
    return IndexCatalog(
        relation=r,
        root=root,
        indexes=indexes,
        correlations={(a, b): v for (a, b), v in correlations.items()},
    )
