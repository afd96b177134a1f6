import numpy as np
import pytest

from pathfinder.data import Kind, Schema, ingest_relation


def make_random_relation(n=1000, dim=8, seed=0, n_categories=6):
    """Random relation with two numeric attributes and one categorical."""
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((n, dim)).astype(np.float32)
    schema = Schema.of(("x", "numeric"), ("y", "numeric"), ("tag", "categorical"))
    cats = [f"c{i}" for i in range(n_categories)]
    attrs = {
        "x": rng.uniform(0.0, 100.0, size=n),
        "y": rng.standard_normal(n),
        "tag": [cats[i] for i in rng.integers(0, n_categories, size=n)],
    }
    return ingest_relation(schema, vectors, attrs)


@pytest.fixture(scope="session")
def random_relation():
    return make_random_relation()
