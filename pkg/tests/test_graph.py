import numpy as np
import pytest

from pathfinder.data import Schema, brute_force_topk, ingest_relation, recall_at_k
from pathfinder.graph import (
    BuildParams,
    SearchParams,
    VamanaGraph,
    best_first_search,
    build_vamana,
    load_graph,
    oor_search,
    robust_prune,
    save_graph,
    search_graph,
)
from pathfinder.predicate import ConjunctiveClause, DnfPredicate, InSet, Range, matching_mask


@pytest.fixture(scope="module")
def relation_2k():
    rng = np.random.default_rng(0)
    n, dim = 2000, 16
    vecs = rng.standard_normal((n, dim)).astype(np.float32)
    schema = Schema.of(("x", "numeric"), ("tag", "categorical"))
    return ingest_relation(
        schema,
        vecs,
        {
            "x": rng.uniform(0.0, 100.0, size=n),
            "tag": [f"c{i}" for i in rng.integers(0, 5, size=n)],
        },
    )


@pytest.fixture(scope="module")
def graph_2k(relation_2k):
    return build_vamana(relation_2k, np.arange(len(relation_2k)), BuildParams(R=16), seed=42)


def line_relation(coords):
    """1-D relation for hand-verifiable distance arithmetic."""
    schema = Schema.of(("x", "numeric"))
    return ingest_relation(schema, [[float(c)] for c in coords], {"x": [float(c) for c in coords]})


class TestParams:
    def test_build_params_validation(self):
        with pytest.raises(ValueError):
            BuildParams(R=1)
        with pytest.raises(ValueError):
            BuildParams(R=16, L_build=8)
        with pytest.raises(ValueError):
            BuildParams(prune_alpha=0.5)

    def test_search_params_validation(self):
        with pytest.raises(ValueError):
            SearchParams(L=5, K=6)
        with pytest.raises(ValueError):
            SearchParams(L=5, K=0)


class TestRobustPrune:
    def test_single_candidate_kept(self):
        r = line_relation([0, 1])
        assert robust_prune(r, 0, [(1, 1.0)], BuildParams(R=4, L_build=8)) == [1]

    def test_collinear_keeps_only_closest(self):
        # v at 0; candidates at 1, 2, 3 on a line, slack 1.0: the point at 1
        # dominates both others.
        r = line_relation([0, 1, 2, 3])
        bp = BuildParams(R=4, L_build=8, prune_alpha=1.0)
        cands = [(pk, float(pk * pk)) for pk in (1, 2, 3)]
        assert robust_prune(r, 0, cands, bp) == [1]

    def test_degree_bound_and_closest_kept(self):
        rng = np.random.default_rng(7)
        schema = Schema.of(("x", "numeric"))
        vecs = rng.standard_normal((60, 4)).astype(np.float32)
        r = ingest_relation(schema, vecs, {"x": np.zeros(60)})
        bp = BuildParams(R=2, L_build=8)
        for _ in range(20):
            pks = rng.choice(np.arange(1, 60), size=50, replace=False)
            cands = [(int(pk), float(np.sum((vecs[pk] - vecs[0]) ** 2))) for pk in pks]
            kept = robust_prune(r, 0, cands, bp)
            assert 1 <= len(kept) <= 2
            best = min(cands, key=lambda c: (c[1], c[0]))[0]
            assert kept[0] == best

    def test_candidates_must_exclude_vertex(self):
        r = line_relation([0, 1])
        with pytest.raises(ValueError):
            robust_prune(r, 0, [(0, 0.0)], BuildParams(R=2, L_build=4))


class TestBuild:
    def test_single_member_graph(self, relation_2k):
        g = build_vamana(relation_2k, [17], BuildParams(R=8), seed=0)
        assert g.card == 1 and g.entry == 17
        assert g.deg[0] == 0
        assert best_first_search(g, relation_2k, relation_2k.vectors[3], SearchParams(L=4, K=1)) == [
            (17, pytest.approx(float(np.sum((relation_2k.vectors[17].astype(np.float64) - relation_2k.vectors[3]) ** 2))))
        ]

    def test_empty_member_set_rejected(self, relation_2k):
        with pytest.raises(ValueError, match="empty member set"):
            build_vamana(relation_2k, [], BuildParams(), seed=0)

    def test_small_graph_reachability(self, relation_2k):
        bp = BuildParams(R=8, L_build=16)
        g = build_vamana(relation_2k, np.arange(100, 109), bp, seed=3)
        # exhaustive traversal from the entry point reaches every member
        seen = {g.entry}
        frontier = [g.entry]
        while frontier:
            nxt = []
            for pk in frontier:
                for n in g.neighbors_of(pk):
                    if int(n) not in seen:
                        seen.add(int(n))
                        nxt.append(int(n))
            frontier = nxt
        assert seen == set(int(p) for p in g.members)

    def test_degree_bound_holds(self, graph_2k):
        assert int(graph_2k.deg.max()) <= graph_2k.R
        graph_2k.validate()

    def test_recall_against_brute_force(self, relation_2k, graph_2k):
        rng = np.random.default_rng(1)
        recalls = []
        for _ in range(100):
            q = rng.standard_normal(16).astype(np.float32)
            hits = best_first_search(graph_2k, relation_2k, q, SearchParams(L=200, K=10))
            truth = brute_force_topk(relation_2k, q, 10)
            recalls.append(recall_at_k([p for p, _ in hits], [p for p, _ in truth], 10))
        assert float(np.mean(recalls)) >= 0.95

    def test_deterministic_for_fixed_seed(self, relation_2k):
        bp = BuildParams(R=8, L_build=32)
        members = np.arange(0, 500)
        g1 = build_vamana(relation_2k, members, bp, seed=9)
        g2 = build_vamana(relation_2k, members, bp, seed=9)
        assert np.array_equal(g1.members, g2.members)
        assert np.array_equal(g1.adj, g2.adj)
        assert np.array_equal(g1.deg, g2.deg)
        assert g1.entry == g2.entry
        q = relation_2k.vectors[777]
        assert best_first_search(g1, relation_2k, q, SearchParams(L=50, K=5)) == best_first_search(
            g2, relation_2k, q, SearchParams(L=50, K=5)
        )


class TestBestFirst:
    def test_bounded_queue_trace(self):
        # Five collinear points; queue length 3. The traversal expands the
        # entry, then the two closest discoveries, evicts the farthest on
        # overflow, and stops before ever expanding the tail vertex.
        r = line_relation([2, 1, 3, 4, 5])  # pks: A=0, B=1, C=2, D=3, E=4
        g = VamanaGraph.from_pk_adjacency(
            members=[0, 1, 2, 3, 4],
            adjacency={0: [1, 3], 1: [0, 2], 2: [1, 4], 3: [0], 4: [2]},
            entry=0,
            R=2,
        )
        out = search_graph(g, r, np.array([0.0], dtype=np.float32), SearchParams(L=3, K=3))
        assert out.expanded_pks.tolist() == [0, 1, 2]
        assert 4 not in out.expanded_pks
        assert out.hits == [(1, 1.0), (0, 4.0), (2, 9.0)]
        assert out.n_evaluated == 5

    def test_exhaustive_when_k_equals_card(self, relation_2k):
        g = build_vamana(relation_2k, np.arange(300, 364), BuildParams(R=8, L_build=16), seed=5)
        hits = best_first_search(g, relation_2k, relation_2k.vectors[0], SearchParams(L=64, K=64))
        assert sorted(pk for pk, _ in hits) == list(range(300, 364))

    def test_results_subset_and_sorted(self, relation_2k, graph_2k):
        rng = np.random.default_rng(2)
        member_set = set(int(p) for p in graph_2k.members)
        for _ in range(25):
            q = rng.standard_normal(16).astype(np.float32)
            hits = best_first_search(graph_2k, relation_2k, q, SearchParams(L=50, K=10))
            assert all(pk in member_set for pk, _ in hits)
            keys = [(d, pk) for pk, d in hits]
            assert keys == sorted(keys)


class TestOutOfRange:
    def test_vacuous_filter_matches_plain_search(self, relation_2k, graph_2k):
        rng = np.random.default_rng(3)
        pred = DnfPredicate((ConjunctiveClause.of(Range("x", lower=-1e9, upper=1e9)),))
        for _ in range(10):
            q = rng.standard_normal(16).astype(np.float32)
            sp = SearchParams(L=80, K=10)
            plain = best_first_search(graph_2k, relation_2k, q, sp)
            filtered = oor_search(graph_2k, relation_2k, q, sp, pred)
            assert plain == filtered

    def test_no_matches_terminates_empty(self, relation_2k, graph_2k):
        pred = DnfPredicate((ConjunctiveClause.of(Range("x", lower=1e9)),))
        hits = oor_search(graph_2k, relation_2k, relation_2k.vectors[5], SearchParams(L=50, K=10), pred)
        assert hits == []

    def test_filtered_recall(self, relation_2k, graph_2k):
        # ~10% selectivity range filter
        pred = DnfPredicate((ConjunctiveClause.of(Range("x", lower=30.0, upper=40.0)),))
        rng = np.random.default_rng(4)
        recalls = []
        for _ in range(100):
            q = rng.standard_normal(16).astype(np.float32)
            hits = oor_search(graph_2k, relation_2k, q, SearchParams(L=400, K=10), pred)
            truth = brute_force_topk(relation_2k, q, 10, pred)
            recalls.append(recall_at_k([p for p, _ in hits], [p for p, _ in truth], 10))
        assert float(np.mean(recalls)) >= 0.9

    def test_hits_satisfy_filter(self, relation_2k, graph_2k):
        pred = DnfPredicate((ConjunctiveClause.of(InSet("tag", frozenset({"c1"}))),))
        mask = matching_mask(pred, relation_2k)
        hits = oor_search(graph_2k, relation_2k, relation_2k.vectors[9], SearchParams(L=100, K=10), pred)
        assert hits and all(mask[pk] for pk, _ in hits)

    def test_recall_monotone_in_queue_length(self, relation_2k, graph_2k):
        pred = DnfPredicate((ConjunctiveClause.of(Range("x", lower=20.0, upper=60.0)),))
        rng = np.random.default_rng(5)
        queries = rng.standard_normal((40, 16)).astype(np.float32)
        truths = [brute_force_topk(relation_2k, q, 10, pred) for q in queries]
        means = []
        for L in (10, 50, 200, 1000):
            rec = [
                recall_at_k(
                    [p for p, _ in oor_search(graph_2k, relation_2k, q, SearchParams(L=L, K=10), pred)],
                    [p for p, _ in t],
                    10,
                )
                for q, t in zip(queries, truths)
            ]
            means.append(float(np.mean(rec)))
        assert all(b >= a - 1e-12 for a, b in zip(means, means[1:]))


class TestSerialization:
    def test_round_trip_identity_and_bytes(self, graph_2k, tmp_path):
        p1 = tmp_path / "g.bin"
        p2 = tmp_path / "g2.bin"
        save_graph(graph_2k, p1)
        loaded = load_graph(p1)
        assert np.array_equal(loaded.members, graph_2k.members)
        assert np.array_equal(loaded.deg, graph_2k.deg)
        assert loaded.entry == graph_2k.entry and loaded.R == graph_2k.R
        for pk in graph_2k.members[:50]:
            assert np.array_equal(loaded.neighbors_of(int(pk)), graph_2k.neighbors_of(int(pk)))
        save_graph(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"nope" + b"\x00" * 32)
        with pytest.raises(ValueError, match="not a graph file"):
            load_graph(path)
