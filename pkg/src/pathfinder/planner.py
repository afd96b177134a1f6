"""Cost-based query planning over the index catalog.

Plans are ranked without any cardinality estimation: for a fixed filter,
the quantity sum(card(g)) * |G|^alpha orders candidate graph sets the
same way the underlying search-utility does, because the filter's own
match count is constant across candidates. Lower rank value is better.

Planning runs in two phases. Each conjunctive clause gets up to two
candidate plans per involved index (the deepest single covering graph,
and one graph per overlapping child of it), and the best candidate
across indexes wins. The per-clause winners are then deduplicated,
grouped by index, and each group is merged bottom-up: a parent graph
replaces the disjoint descendant graphs collected below it whenever the
parent ranks strictly better.

A filter atom on an attribute with no index can borrow a correlated
attribute's index: the stored per-node value summaries synthesize a
covering predicate on the indexed attribute, planning proceeds with the
synthesized atom, and execution still applies the original filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .index import (
    ROOT_ID,
    AttributeIndex,
    HashIndex,
    IndexCatalog,
    IndexNode,
    NumericSpan,
    TreeIndex,
    ValueSet,
)
from .predicate import (
    AtomicPredicate,
    ConjunctiveClause,
    DnfPredicate,
    InSet,
    Range,
    conjoin_simplify,
    covers,
    overlaps,
)

__all__ = [
    "PlannerConfig",
    "RankKey",
    "PlanEntry",
    "GraphSearchPlan",
    "EmptySynthesisError",
    "rank",
    "find_single_graph",
    "find_second_plan",
    "plan_conjunction",
    "conjunction_candidates",
    "optimize_disjunction_group",
    "plan_query",
    "synthesize_pred_hash",
    "synthesize_pred_tree",
    "borrow_rewrite",
    "ExplainReport",
    "explain_query",
]

ROOT_INDEX_ID = "root"


class EmptySynthesisError(Exception):
    """Predicate synthesis proved that no stored tuple can match; the
    caller should produce an empty result without searching."""


@dataclass(frozen=True)
class PlannerConfig:
    alpha: float = 0.4
    borrowing_enabled: bool = True
    correlation_threshold: float = 0.3

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


@dataclass(frozen=True)
class RankKey:
    """Plan ordering key: covering plans beat non-covering ones, then the
    smaller value wins."""

    value: float
    covering: bool = True


def rank(nodes, covering: bool, cfg: PlannerConfig) -> RankKey:
    """Rank value of a graph set: sum(card) * |G|^alpha."""
    nodes = list(nodes)
    if not nodes:
        raise ValueError("cannot rank an empty graph set")
    total = sum(n.card for n in nodes)
    return RankKey(value=total * len(nodes) ** cfg.alpha, covering=covering)


@dataclass(frozen=True)
class PlanEntry:
    """One graph in a plan, with index provenance and the clause ordinals
    it was selected for."""

    index_id: str
    node: IndexNode
    clauses: frozenset[int] = frozenset()

    @property
    def node_id(self) -> str:
        return self.node.node_id

    @property
    def key(self) -> tuple[str, str]:
        return (self.index_id, self.node_id)


@dataclass(frozen=True)
class GraphSearchPlan:
    """The planner output: graphs whose union holds every matching tuple."""

    entries: tuple[PlanEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("plan must contain at least one graph")

    @property
    def nodes(self) -> list[IndexNode]:
        return [e.node for e in self.entries]

    def total_card(self) -> int:
        return sum(e.node.card for e in self.entries)

    def member_mask(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        for e in self.entries:
            mask[e.node.graph.members] = True
        return mask

    def describe(self) -> list[tuple[str, str, int]]:
        return [(e.index_id, e.node_id, e.node.card) for e in self.entries]


def _candidate_key(entries: list[PlanEntry], cfg: PlannerConfig, covering: bool = True):
    """Total order over candidate plans: covering first, then rank value,
    fewer graphs, smaller total cardinality, and node ids as the final
    deterministic tiebreak."""
    nodes = [e.node for e in entries]
    key = rank(nodes, covering, cfg)
    return (
        0 if key.covering else 1,
        key.value,
        len(entries),
        sum(n.card for n in nodes),
        tuple(sorted(e.key for e in entries)),
    )


def _entry(catalog: IndexCatalog, index: AttributeIndex, node: IndexNode, clauses=frozenset()) -> PlanEntry:
    """Normalize: any node holding the shared root graph becomes the
    canonical root entry so duplicates collapse across indexes."""
    if node.node_id == ROOT_ID:
        return PlanEntry(ROOT_INDEX_ID, catalog.root, clauses)
    return PlanEntry(index.index_id, node, clauses)


# -- conjunction planning --------------------------------------------------

def find_single_graph(index: AttributeIndex, node: IndexNode, p: ConjunctiveClause) -> IndexNode:
    """Deepest descendant of node (possibly node itself) that still covers
    the clause, following the unique chain of covering children."""
    if node.is_leaf:
        return node
    for child in index.children_of(node):
        if covers(child.predicate, p):
            return find_single_graph(index, child, p)
    return node


def find_second_plan(index: AttributeIndex, g_s: IndexNode, p: ConjunctiveClause) -> list[IndexNode]:
    """Split the clause along g_s's children and pick one covering graph
    per overlapping child: several smaller, denser graphs that together
    cover the clause."""
    out = []
    for child in index.children_of(g_s):
        if overlaps(child.predicate, p):
            out.append(find_single_graph(index, child, conjoin_simplify(p, child.predicate)))
    assert out, "a covered clause must overlap at least one child"
    return out


def _conjunction_candidates(
    catalog: IndexCatalog, planning_clause: ConjunctiveClause
) -> list[list[PlanEntry]]:
    involved = [
        catalog.indexes[attr]
        for attr in planning_clause.attrs
        if attr in catalog.indexes
    ]
    if not involved:
        return [[PlanEntry(ROOT_INDEX_ID, catalog.root)]]
    candidates: list[list[PlanEntry]] = []
    for index in sorted(involved, key=lambda i: i.index_id):
        g_s = find_single_graph(index, index.root, planning_clause)
        candidates.append([_entry(catalog, index, g_s)])
        if not g_s.is_leaf:
            second = find_second_plan(index, g_s, planning_clause)
            candidates.append([_entry(catalog, index, n) for n in second])
    return candidates


def conjunction_candidates(
    c: ConjunctiveClause, catalog: IndexCatalog, cfg: PlannerConfig
) -> list[list[PlanEntry]]:
    """The candidate plans considered for one clause (after borrowing)."""
    return _conjunction_candidates(catalog, borrow_rewrite(c, catalog, cfg))


def plan_conjunction(
    c: ConjunctiveClause, catalog: IndexCatalog, cfg: PlannerConfig, clause_no: int = 0
) -> GraphSearchPlan:
    """Best candidate plan for one conjunctive clause across all involved
    indexes (after any borrowing rewrite)."""
    planning_clause = borrow_rewrite(c, catalog, cfg)
    candidates = _conjunction_candidates(catalog, planning_clause)
    winner = min(candidates, key=lambda entries: _candidate_key(entries, cfg))
    tagged = [PlanEntry(e.index_id, e.node, frozenset({clause_no})) for e in winner]
    return GraphSearchPlan(tuple(tagged))


# -- disjunction merging ----------------------------------------------------

def _optimize_group(
    index: AttributeIndex,
    group: dict[str, frozenset[int]],
    cfg: PlannerConfig,
) -> dict[str, frozenset[int]]:
    """Bottom-up merge for one index's selected nodes.

    Each node carries a running plan: the disjoint selected descendants
    that the node could subsume. A parent replaces that set when its rank
    is strictly better; a selected parent otherwise restarts its own plan
    because it overlaps everything below it.
    """
    current: dict[str, frozenset[int]] = dict(group)
    plans: dict[str, set[str]] = {}
    for leaf_id in index.leaf_ids():
        plans[leaf_id] = {leaf_id} if leaf_id in current else set()
    for g_p in index.non_leaves_bottom_up():
        gp_id = g_p.node_id
        S: set[str] = set()
        for child_id in g_p.children:
            S |= plans[child_id]
        if not S:
            plans[gp_id] = {gp_id} if gp_id in current else set()
            continue
        s_entries = [index.nodes[nid] for nid in S]
        replace = _group_key([g_p], cfg) < _group_key(s_entries, cfg)
        if replace:
            merged: frozenset[int] = frozenset()
            for nid in S:
                merged |= current.pop(nid)
            current[gp_id] = current.get(gp_id, frozenset()) | merged
            plans[gp_id] = {gp_id}
        elif gp_id not in current:
            plans[gp_id] = S
        else:
            plans[gp_id] = {gp_id}
    return current


def _group_key(nodes: list[IndexNode], cfg: PlannerConfig):
    # Within a group every comparison concerns the same in-index region,
    # so the covering flag is uniform and only the rank chain matters.
    key = rank(nodes, True, cfg)
    return (key.value, len(nodes), sum(n.card for n in nodes), tuple(sorted(n.node_id for n in nodes)))


def optimize_disjunction_group(
    G, p: DnfPredicate, index: AttributeIndex, cfg: PlannerConfig
) -> list[IndexNode]:
    """Merge one index's deduplicated graph set bottom-up, replacing
    disjoint descendants with an ancestor whenever that ranks better.
    May introduce the index root. The filter p is carried for interface
    parity; the rank comparison does not depend on it."""
    group = {n.node_id: frozenset() for n in G}
    merged = _optimize_group(index, group, cfg)
    return [index.nodes[nid] for nid in sorted(merged)]


def plan_query(
    p: DnfPredicate, catalog: IndexCatalog, cfg: PlannerConfig | None = None
) -> GraphSearchPlan:
    """Full two-phase planning: per-clause winners, dedup, per-index
    bottom-up merges, and the final union.

    Raises EmptySynthesisError when borrowing proves that no clause can
    match any stored tuple.
    """
    cfg = cfg or PlannerConfig()
    merged: dict[tuple[str, str], PlanEntry] = {}
    for i, clause in enumerate(p.clauses):
        try:
            clause_plan = plan_conjunction(clause, catalog, cfg, clause_no=i)
        except EmptySynthesisError:
            continue
        for e in clause_plan.entries:
            prev = merged.get(e.key)
            if prev is None:
                merged[e.key] = e
            else:
                merged[e.key] = PlanEntry(e.index_id, e.node, prev.clauses | e.clauses)
    if not merged:
        raise EmptySynthesisError("no clause can match any stored tuple")

    final: dict[tuple[str, str], PlanEntry] = {}
    root_key = (ROOT_INDEX_ID, ROOT_ID)
    if root_key in merged:
        final[root_key] = merged[root_key]

    by_index: dict[str, list[PlanEntry]] = {}
    for e in merged.values():
        if e.index_id != ROOT_INDEX_ID:
            by_index.setdefault(e.index_id, []).append(e)

    for index_id in sorted(by_index):
        index = next(
            idx for idx in catalog.indexes.values() if idx.index_id == index_id
        )
        group = {e.node_id: e.clauses for e in by_index[index_id]}
        merged_group = _optimize_group(index, group, cfg)
        for node_id, clauses in merged_group.items():
            e = _entry(catalog, index, index.nodes[node_id], clauses)
            prev = final.get(e.key)
            if prev is not None:
                e = PlanEntry(e.index_id, e.node, prev.clauses | e.clauses)
            final[e.key] = e

    entries = tuple(final[k] for k in sorted(final))
    return GraphSearchPlan(entries)


# -- index borrowing ---------------------------------------------------------

def _summary_overlaps(summary, atom: AtomicPredicate) -> bool:
    if isinstance(summary, NumericSpan) and isinstance(atom, Range):
        return summary.overlaps_atom(atom)
    if isinstance(summary, ValueSet) and isinstance(atom, InSet):
        return summary.overlaps_atom(atom)
    raise TypeError(
        f"stored {type(summary).__name__} cannot be tested against {type(atom).__name__}"
    )


def synthesize_pred_hash(idx: HashIndex, p_b: AtomicPredicate) -> InSet:
    """Membership predicate on the hash attribute covering p_b: the
    categories whose stored value summary for p_b's attribute overlaps
    the predicate region."""
    cats = []
    for cat in sorted(idx.leaves):
        node = idx.nodes[idx.leaves[cat]]
        if _summary_overlaps(node.attr_ranges[p_b.attr], p_b):
            cats.append(cat)
    if not cats:
        raise EmptySynthesisError(
            f"no {idx.attr!r} category holds values matching {p_b}"
        )
    return InSet(idx.attr, frozenset(cats))


def synthesize_pred_tree(idx: TreeIndex, p_b: AtomicPredicate) -> Range | None:
    """Range predicate on the tree attribute covering p_b.

    Scans the leaves left to right for the first whose stored summary
    overlaps p_b, and right to left for the last; the bounds come from
    those leaves' own subrange predicates. Returns None when every leaf
    overlaps on both ends (no usable constraint).
    """
    leaf_ids = idx.leaf_ids()
    hits = [
        _summary_overlaps(idx.nodes[lid].attr_ranges[p_b.attr], p_b) for lid in leaf_ids
    ]
    if not any(hits):
        raise EmptySynthesisError(f"no {idx.attr!r} subrange holds values matching {p_b}")
    first = idx.nodes[leaf_ids[hits.index(True)]].predicate
    last = idx.nodes[leaf_ids[len(hits) - 1 - hits[::-1].index(True)]].predicate
    lower = getattr(first, "lower", None)
    lower_inc = getattr(first, "lower_inclusive", True)
    upper = getattr(last, "upper", None)
    upper_inc = getattr(last, "upper_inclusive", True)
    if lower is None and upper is None:
        return None
    return Range(
        idx.attr,
        lower=lower,
        lower_inclusive=lower_inc,
        upper=upper,
        upper_inclusive=upper_inc,
    )


def _synthesize(index: AttributeIndex, p_b: AtomicPredicate):
    if isinstance(index, HashIndex):
        return synthesize_pred_hash(index, p_b)
    return synthesize_pred_tree(index, p_b)


def borrow_rewrite(
    c: ConjunctiveClause, catalog: IndexCatalog, cfg: PlannerConfig
) -> ConjunctiveClause:
    """Rewrite each atom on an unindexed attribute into a synthesized atom
    on the most correlated indexed attribute not already in the clause.

    The rewritten clause is only for planning; execution always applies
    the original filter. Raises EmptySynthesisError when synthesis proves
    the clause can match no stored tuple.
    """
    if not cfg.borrowing_enabled or c.empty:
        return c
    original_attrs = set(c.attrs)
    kept: list[AtomicPredicate] = []
    borrowed: list[AtomicPredicate] = []
    for atom in c.atoms:
        if atom.attr in catalog.indexes:
            kept.append(atom)
            continue
        best = None
        for attr in sorted(catalog.indexes):
            if attr in original_attrs:
                continue
            score = catalog.correlation(attr, atom.attr)
            if score < cfg.correlation_threshold:
                continue
            if best is None or score > best[0]:
                best = (score, attr)
        if best is None:
            kept.append(atom)
            continue
        synth = _synthesize(catalog.indexes[best[1]], atom)
        if synth is not None:
            borrowed.append(synth)
    out = ConjunctiveClause(tuple(kept))
    for atom in borrowed:
        out = conjoin_simplify(out, atom)
    if out.empty:
        raise EmptySynthesisError("synthesized constraints intersect to nothing")
    return out


# -- explain -----------------------------------------------------------------

@dataclass
class ClauseExplain:
    clause: str
    planning_clause: str
    candidates: list[tuple[list[tuple[str, str, int]], float]]
    winner: list[tuple[str, str, int]]
    empty: bool = False


@dataclass
class GroupExplain:
    index_id: str
    before: list[tuple[str, int]]
    after: list[tuple[str, int]]


@dataclass
class ExplainReport:
    dnf: str
    clauses: list[ClauseExplain]
    groups: list[GroupExplain]
    final: list[tuple[str, str, int]]

    def render(self) -> str:
        lines = [f"filter (DNF): {self.dnf}"]
        for i, ce in enumerate(self.clauses):
            lines.append(f"clause {i}: {ce.clause}")
            if ce.planning_clause != ce.clause:
                lines.append(f"  planned as: {ce.planning_clause}")
            if ce.empty:
                lines.append("  no stored tuple can match; clause skipped")
                continue
            for entries, value in ce.candidates:
                names = ", ".join(f"{ix}/{nid}(card={card})" for ix, nid, card in entries)
                lines.append(f"  candidate value={value:.2f}: {{{names}}}")
            names = ", ".join(f"{ix}/{nid}" for ix, nid, _ in ce.winner)
            lines.append(f"  winner: {{{names}}}")
        for ge in self.groups:
            before = ", ".join(f"{nid}(card={c})" for nid, c in ge.before)
            after = ", ".join(f"{nid}(card={c})" for nid, c in ge.after)
            lines.append(f"group {ge.index_id}: {{{before}}} -> {{{after}}}")
        lines.append("final plan:")
        for ix, nid, card in self.final:
            lines.append(f"  {ix}  {nid}  card={card}")
        return "\n".join(lines)


def explain_query(
    p: DnfPredicate, catalog: IndexCatalog, cfg: PlannerConfig | None = None
) -> ExplainReport:
    """Planning with full visibility: per-clause candidates and rank
    values, borrowing rewrites, group merges, and the final plan."""
    cfg = cfg or PlannerConfig()
    clauses: list[ClauseExplain] = []
    merged: dict[tuple[str, str], PlanEntry] = {}
    for i, clause in enumerate(p.clauses):
        try:
            planning_clause = borrow_rewrite(clause, catalog, cfg)
        except EmptySynthesisError:
            clauses.append(ClauseExplain(str(clause), str(clause), [], [], empty=True))
            continue
        candidates = _conjunction_candidates(catalog, planning_clause)
        ranked = [
            ([(e.index_id, e.node_id, e.node.card) for e in entries],
             rank([e.node for e in entries], True, cfg).value)
            for entries in candidates
        ]
        winner = min(candidates, key=lambda entries: _candidate_key(entries, cfg))
        clauses.append(
            ClauseExplain(
                clause=str(clause),
                planning_clause=str(planning_clause),
                candidates=ranked,
                winner=[(e.index_id, e.node_id, e.node.card) for e in winner],
            )
        )
        for e in winner:
            key = e.key
            prev = merged.get(key)
            cl = frozenset({i}) | (prev.clauses if prev else frozenset())
            merged[key] = PlanEntry(e.index_id, e.node, cl)

    groups: list[GroupExplain] = []
    if merged:
        by_index: dict[str, list[PlanEntry]] = {}
        for e in merged.values():
            if e.index_id != ROOT_INDEX_ID:
                by_index.setdefault(e.index_id, []).append(e)
        for index_id in sorted(by_index):
            index = next(idx for idx in catalog.indexes.values() if idx.index_id == index_id)
            entries = by_index[index_id]
            out = _optimize_group(index, {e.node_id: e.clauses for e in entries}, cfg)
            groups.append(
                GroupExplain(
                    index_id=index_id,
                    before=sorted((e.node_id, e.node.card) for e in entries),
                    after=sorted((nid, index.nodes[nid].card) for nid in out),
                )
            )
        plan = plan_query(p, catalog, cfg)
        final = plan.describe()
    else:
        final = []
    return ExplainReport(dnf=str(p), clauses=clauses, groups=groups, final=final)
