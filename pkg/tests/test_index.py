from collections import Counter

import numpy as np
import pytest

from pathfinder.data import Schema, ingest_relation
from pathfinder.graph import BuildParams
from pathfinder.index import (
    IndexSpec,
    NumericSpan,
    ValueSet,
    build_catalog,
    build_hash_index,
    build_tree_index,
    compute_attr_ranges,
    compute_correlations,
    load_catalog,
    save_catalog,
    tree_partition,
)
from pathfinder.predicate import MatchAll, evaluate, matching_mask

BP_SMALL = BuildParams(R=8, L_build=16)


def small_relation(n=240, seed=0, dim=6, n_categories=4):
    rng = np.random.default_rng(seed)
    schema = Schema.of(("a", "numeric"), ("b", "numeric"), ("topic", "categorical"))
    return ingest_relation(
        schema,
        rng.standard_normal((n, dim)).astype(np.float32),
        {
            "a": rng.standard_normal(n),
            "b": rng.uniform(0, 1000, n),
            "topic": [f"t{i}" for i in rng.integers(0, n_categories, n)],
        },
    )


class TestTreePartition:
    def test_eight_tuples_full_split(self):
        layers = tree_partition(np.arange(8, dtype=float), fanout=2, height=4)
        leaf_cards = [len(m) for m, _, _ in layers[3]]
        assert leaf_cards == [1] * 8
        for layer in layers:
            assert sum(len(m) for m, _, _ in layer) == 8

    def test_boundary_values_and_region_nesting(self):
        # 16 distinct integers split at 8, then 4 and 12
        layers = tree_partition(np.arange(1.0, 17.0), fanout=2, height=3)
        (l1a, lo1a, hi1a), (l1b, lo1b, hi1b) = layers[1]
        assert (lo1a, hi1a) == (None, 8.0)
        assert (lo1b, hi1b) == (8.0, None)
        bounds2 = [(lo, hi) for _, lo, hi in layers[2]]
        assert bounds2 == [(None, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, None)]
        # children partition the parent region
        assert bounds2[0][0] == lo1a and bounds2[1][1] == hi1a
        assert bounds2[2][0] == lo1b and bounds2[3][1] == hi1b

    def test_desk_scale_leaf_cardinalities(self):
        rng = np.random.default_rng(1)
        values = rng.uniform(0, 1, 10_000)
        layers = tree_partition(values, fanout=2, height=7)
        cards = Counter(len(m) for m, _, _ in layers[6])
        assert len(layers[6]) == 64
        assert set(cards) <= {156, 157}
        assert sum(len(m) for m, _, _ in layers[6]) == 10_000

    def test_duplicates_stay_left(self):
        values = np.array([1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        layers = tree_partition(values, fanout=2, height=2)
        (left, _, b), (right, lo, _) = layers[1]
        assert b == 2.0 and lo == 2.0
        assert set(values[left]) == {1.0, 2.0}
        assert 2.0 not in values[right]

    def test_too_many_layers_rejected(self):
        with pytest.raises(ValueError, match="too many layers"):
            tree_partition(np.arange(7, dtype=float), fanout=2, height=4)

    def test_heavy_duplicates_rejected(self):
        with pytest.raises(ValueError, match="too many layers"):
            tree_partition(np.ones(64), fanout=2, height=3)


@pytest.fixture(scope="module")
def tree():
    r = small_relation()
    return r, build_tree_index(r, "a", fanout=2, height=4, bp=BP_SMALL, seed=7)


@pytest.fixture(scope="module")
def catalog():
    r = small_relation()
    return build_catalog(
        r,
        [IndexSpec("tree", "a", 2, 3), IndexSpec("hash", "topic")],
        bp=BP_SMALL,
        seed=11,
    )


class TestTreeIndex:
    def test_structure(self, tree):
        r, idx = tree
        assert [len(layer) for layer in idx.layers] == [1, 2, 4, 8]
        assert isinstance(idx.root.predicate, MatchAll)
        assert idx.root.card == len(r)

    def test_partition_and_cardinality_invariants(self, tree):
        r, idx = tree
        for layer_no, layer in enumerate(idx.layers[:-1]):
            for node_id in layer:
                node = idx.nodes[node_id]
                children = idx.children_of(node)
                assert sum(c.card for c in children) == node.card
                seen = np.concatenate([c.graph.members for c in children])
                assert np.array_equal(np.sort(seen), node.graph.members)

    def test_membership_invariant(self, tree):
        r, idx = tree
        for node in idx.all_nodes():
            mask = matching_mask(node.predicate, r)
            assert mask[node.graph.members].all()

    def test_cards_match_counting_oracle(self, tree):
        r, idx = tree
        col = r.column("a")
        for node in idx.all_nodes():
            if isinstance(node.predicate, MatchAll):
                expected = len(r)
            else:
                p = node.predicate
                sel = np.ones(len(r), dtype=bool)
                if p.lower is not None:
                    sel &= col > p.lower
                if p.upper is not None:
                    sel &= col <= p.upper
                expected = int(sel.sum())
            assert node.card == expected

    def test_non_numeric_attr_rejected(self):
        r = small_relation()
        with pytest.raises(ValueError, match="numeric"):
            build_tree_index(r, "topic", 2, 3, BP_SMALL, seed=0)


class TestHashIndex:
    def test_single_category(self):
        schema = Schema.of(("t", "categorical"))
        rng = np.random.default_rng(0)
        r = ingest_relation(schema, rng.standard_normal((30, 4)).astype(np.float32), {"t": ["only"] * 30})
        idx = build_hash_index(r, "t", BP_SMALL, seed=1)
        assert list(idx.leaves) == ["only"]
        assert idx.nodes[idx.leaves["only"]].card == 30

    def test_topic_leaves(self):
        r = small_relation()
        idx = build_hash_index(r, "topic", BP_SMALL, seed=1)
        counts = Counter(r.column("topic"))
        assert set(idx.leaves) == set(counts)
        for cat, node_id in idx.leaves.items():
            assert idx.nodes[node_id].card == counts[cat]
        assert sum(idx.nodes[n].card for n in idx.leaf_ids()) == len(r)

    def test_many_categories_match_frequency_oracle(self):
        rng = np.random.default_rng(3)
        n_cat, n = 350, 1400
        cats = [f"sub{i:03d}" for i in range(n_cat)]
        labels = [cats[i] for i in rng.integers(0, n_cat, n)]
        # ensure every category appears
        labels[:n_cat] = cats
        schema = Schema.of(("s", "categorical"))
        r = ingest_relation(schema, rng.standard_normal((n, 3)).astype(np.float32), {"s": labels})
        idx = build_hash_index(r, "s", BuildParams(R=4, L_build=8), seed=5)
        oracle = Counter(labels)
        assert len(idx.leaves) == n_cat
        for cat, node_id in idx.leaves.items():
            assert idx.nodes[node_id].card == oracle[cat]

    def test_numeric_attr_rejected(self):
        r = small_relation()
        with pytest.raises(ValueError, match="categorical"):
            build_hash_index(r, "a", BP_SMALL, seed=0)


class TestAttrRanges:
    def test_ranges_match_scan_oracle(self, catalog):
        r = catalog.relation
        for _, node in catalog.all_nodes():
            members = node.graph.members
            for name, _ in r.schema.columns:
                col = r.column(name)[members]
                summary = node.attr_ranges[name]
                if isinstance(summary, NumericSpan):
                    assert summary.min == float(col.min())
                    assert summary.max == float(col.max())
                else:
                    assert summary.values == frozenset(str(v) for v in col)

    def test_single_tuple_node_degenerate_range(self):
        schema = Schema.of(("a", "numeric"), ("t", "categorical"))
        r = ingest_relation(
            schema,
            np.eye(4, 3, dtype=np.float32),
            {"a": [1.0, 2.0, 3.0, 4.0], "t": list("wxyz")},
        )
        cat = build_catalog(r, [IndexSpec("tree", "a", 2, 3)], bp=BuildParams(R=2, L_build=4), seed=0)
        leaf = cat.indexes["a"].nodes["a.L2.0"]
        assert leaf.card == 1
        span = leaf.attr_ranges["a"]
        assert span.min == span.max

    def test_parent_contains_child(self, catalog):
        for idx in catalog.indexes.values():
            for node in idx.non_leaves_bottom_up():
                for child in idx.children_of(node):
                    for name, summary in node.attr_ranges.items():
                        assert summary.contains(child.attr_ranges[name])


class TestCorrelations:
    def test_perfect_linear_dependence(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(2000)
        schema = Schema.of(("a", "numeric"), ("b", "numeric"))
        r = ingest_relation(schema, rng.standard_normal((2000, 2)).astype(np.float32), {"a": a, "b": a})
        assert compute_correlations(r)[("a", "b")] == pytest.approx(1.0)

    def test_independent_attrs_near_zero(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            schema = Schema.of(("a", "numeric"), ("b", "numeric"))
            r = ingest_relation(
                schema,
                rng.standard_normal((10_000, 2)).astype(np.float32),
                {"a": rng.uniform(0, 1, 10_000), "b": rng.uniform(0, 1, 10_000)},
            )
            assert compute_correlations(r)[("a", "b")] < 0.05

    def test_additive_noise_matches_analytic_value(self):
        rng = np.random.default_rng(9)
        n = 10_000
        a = rng.standard_normal(n)
        b = a + 0.5 * rng.standard_normal(n)
        schema = Schema.of(("a", "numeric"), ("b", "numeric"))
        r = ingest_relation(schema, rng.standard_normal((n, 2)).astype(np.float32), {"a": a, "b": b})
        assert compute_correlations(r)[("a", "b")] == pytest.approx(1 / np.sqrt(1.25), abs=0.02)

    def test_zero_variance_scores_zero(self):
        rng = np.random.default_rng(2)
        schema = Schema.of(("a", "numeric"), ("b", "numeric"))
        r = ingest_relation(
            schema,
            rng.standard_normal((100, 2)).astype(np.float32),
            {"a": np.ones(100), "b": rng.uniform(size=100)},
        )
        assert compute_correlations(r)[("a", "b")] == 0.0

    def test_numeric_categorical_ratio(self):
        rng = np.random.default_rng(4)
        n = 5000
        a = rng.standard_normal(n)
        bucket = np.where(a < 0, "neg", "pos")
        schema = Schema.of(("a", "numeric"), ("t", "categorical"))
        r = ingest_relation(schema, rng.standard_normal((n, 2)).astype(np.float32), {"a": a, "t": list(bucket)})
        corr = compute_correlations(r)
        assert 0.5 < corr[("a", "t")] <= 1.0

    def test_categorical_pair_is_zero(self):
        rng = np.random.default_rng(5)
        schema = Schema.of(("s", "categorical"), ("t", "categorical"))
        labels = [f"c{i}" for i in rng.integers(0, 3, 100)]
        r = ingest_relation(schema, rng.standard_normal((100, 2)).astype(np.float32), {"s": labels, "t": labels})
        assert compute_correlations(r)[("s", "t")] == 0.0


class TestCatalogSerialization:
    def test_round_trip(self, tmp_path):
        r = small_relation(n=180)
        catalog = build_catalog(
            r,
            [IndexSpec("tree", "a", 2, 3), IndexSpec("hash", "topic")],
            bp=BP_SMALL,
            seed=3,
        )
        out = tmp_path / "cat"
        save_catalog(catalog, out)
        loaded = load_catalog(out)

        assert loaded.relation.schema == r.schema
        assert np.array_equal(loaded.relation.vectors, r.vectors)
        assert loaded.correlations == pytest.approx(catalog.correlations)
        assert set(loaded.indexes) == set(catalog.indexes)
        for attr, idx in catalog.indexes.items():
            lidx = loaded.indexes[attr]
            assert lidx.layers == idx.layers
            for node_id, node in idx.nodes.items():
                lnode = lidx.nodes[node_id]
                assert lnode.predicate == node.predicate
                assert lnode.card == node.card
                assert lnode.children == node.children
                assert lnode.attr_ranges == node.attr_ranges
                assert np.array_equal(lnode.graph.members, node.graph.members)
        # shared root graph stays shared after a round trip
        assert loaded.indexes["a"].root.graph is loaded.root.graph

    def test_save_is_deterministic(self, tmp_path):
        r = small_relation(n=120)
        catalog = build_catalog(r, [IndexSpec("tree", "a", 2, 3)], bp=BP_SMALL, seed=3)
        save_catalog(catalog, tmp_path / "c1")
        save_catalog(catalog, tmp_path / "c2")
        m1 = (tmp_path / "c1" / "manifest.json").read_bytes()
        m2 = (tmp_path / "c2" / "manifest.json").read_bytes()
        assert m1 == m2
        g1 = sorted((tmp_path / "c1" / "graphs").iterdir())
        g2 = sorted((tmp_path / "c2" / "graphs").iterdir())
        assert [p.name for p in g1] == [p.name for p in g2]
        for p1, p2 in zip(g1, g2):
            assert p1.read_bytes() == p2.read_bytes()


class TestIndexSpec:
    def test_parse(self):
        s = IndexSpec.parse("tree:price:2:5")
        assert (s.kind, s.attr, s.fanout, s.height) == ("tree", "price", 2, 5)
        assert IndexSpec.parse("hash:topic") == IndexSpec("hash", "topic")
        with pytest.raises(ValueError):
            IndexSpec.parse("btree:a")
        with pytest.raises(ValueError):
            IndexSpec.parse("tree:a:2")
