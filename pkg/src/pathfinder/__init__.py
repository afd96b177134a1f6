"""Filtered approximate nearest neighbor search with attribute-specific
proximity-graph indexes and a cost-based query planner."""

from .data import (
    Kind,
    Metric,
    Relation,
    Schema,
    Tuple,
    brute_force_topk,
    distance,
    ingest_relation,
    read_fvecs,
    recall_at_k,
    write_fvecs,
)
from .graph import (
    BuildParams,
    SearchParams,
    VamanaGraph,
    best_first_search,
    build_vamana,
    oor_search,
    robust_prune,
)
from .predicate import (
    And,
    ConjunctiveClause,
    DnfPredicate,
    InSet,
    MatchAll,
    Or,
    Range,
    conjoin_simplify,
    covers,
    evaluate,
    matching_mask,
    overlaps,
    parse_filter,
    to_dnf,
)

__version__ = "0.1.0"
