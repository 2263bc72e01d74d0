import numpy as np
import pytest

from degc.model import init_model, init_table
from degc.stream import Interaction, build_bipartite_graph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_interactions(pairs, t0=0, step=10):
    """(user, item) pairs to Interactions with increasing timestamps."""
    return [Interaction(u, i, t0 + n * step) for n, (u, i) in enumerate(pairs)]


def tiny_model_and_graph(seed=0, dim=4, widths=(3, 2), variant="ngcf", n_users=4, n_items=5):
    """A small random model over a dense-ish bipartite fixture."""
    rng = np.random.default_rng(seed)
    users = [f"u{j}" for j in range(n_users)]
    items = [f"i{j}" for j in range(n_items)]
    pairs = []
    for a, u in enumerate(users):
        for b, i in enumerate(items):
            if (a + b) % 2 == 0:
                pairs.append((u, i))
    interactions = make_interactions(pairs)
    graph = build_bipartite_graph(interactions)
    model = init_model(variant, dim, widths, rng, scale=0.2)
    table = init_table(dim, users, items, rng, scale=0.5)
    return model, table, graph, interactions
