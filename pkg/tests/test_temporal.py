import numpy as np
import pytest

from degc.model import EmbeddingTable
from degc.stream import build_user_user_graph, segment_stream
from degc.temporal import (
    TemporalAttention,
    estimate_shift,
    fit_temporal_attention,
    init_embeddings_plain,
    init_user_embeddings,
    refresh_history,
)

from conftest import make_interactions


def _segment(pairs, index_count=1):
    rows = make_interactions(pairs)
    return segment_stream(rows, index_count)[0]


def _table_with(users, items, dim=2, fill=0.5):
    table = EmbeddingTable(dim)
    for n, u in enumerate(users):
        table.add_user(u, np.full(dim, fill + n))
    for n, i in enumerate(items):
        table.add_item(i, np.full(dim, -1.0 - n))
    return table


# ---------------------------------------------------------------------------
# shift estimation
# ---------------------------------------------------------------------------


def test_shift_zero_elapsed_time():
    ta = TemporalAttention(np.array([0.3, -0.4]))
    ta.last_seen["u"] = 4
    ta.prev_embeddings["u"] = np.array([1.0, 2.0])
    assert np.array_equal(estimate_shift(ta, "u", 4), [0.0, 0.0])


def test_shift_hand_case():
    ta = TemporalAttention(np.array([0.1, 0.2]))
    ta.last_seen["u"] = 1
    ta.prev_embeddings["u"] = np.array([1.0, 1.0])
    shift = estimate_shift(ta, "u", 3)  # dt = 2
    assert np.allclose(shift, [0.2, 0.4], atol=1e-15)


def test_shift_zero_vector_degenerates_to_inheritance():
    ta = TemporalAttention(np.zeros(3))
    ta.last_seen["u"] = 1
    ta.prev_embeddings["u"] = np.array([0.5, -0.5, 2.0])
    for t in (2, 5, 50):
        assert np.array_equal(estimate_shift(ta, "u", t), np.zeros(3))


def test_shift_unknown_user():
    ta = TemporalAttention.zeros(2)
    with pytest.raises(KeyError):
        estimate_shift(ta, "ghost", 3)


# ---------------------------------------------------------------------------
# segment-start initialization
# ---------------------------------------------------------------------------


def test_init_new_user_neighbor_mean(rng):
    # new user u3 shares items with existing users u1 (e=[1,0]) and u2 (e=[0,1])
    segment = _segment([("u1", "iA"), ("u2", "iB"), ("u3", "iA"), ("u3", "iB")])
    table = EmbeddingTable(2)
    table.add_user("u1", [1.0, 0.0])
    table.add_user("u2", [0.0, 1.0])
    ta = TemporalAttention.zeros(2)
    ta.last_seen = {"u1": 0, "u2": 0}
    ta.prev_embeddings = {"u1": np.array([1.0, 0.0]), "u2": np.array([0.0, 1.0])}
    graph = build_user_user_graph(segment, co_threshold=1)
    report = init_user_embeddings(ta, segment, graph, table, rng)
    assert np.allclose(table.user_vector("u3"), [0.5, 0.5], atol=1e-15)
    assert report.new_users == ["u3"]
    assert report.cold_users == []


def test_init_existing_user_zero_shift_unchanged(rng):
    segment = _segment([("u1", "iA")])
    table = _table_with(["u1"], [])
    ta = TemporalAttention.zeros(2)
    ta.last_seen = {"u1": 0}
    ta.prev_embeddings = {"u1": table.user_vector("u1")}
    before = table.user_vector("u1")
    init_user_embeddings(ta, segment, build_user_user_graph(segment), table, rng)
    assert np.array_equal(table.user_vector("u1"), before)


def test_init_cold_user_fallback_bounded(rng):
    segment = _segment([("new", "iA")])
    table = EmbeddingTable(4)
    ta = TemporalAttention.zeros(4)
    report = init_user_embeddings(
        ta, segment, build_user_user_graph(segment), table, rng, fallback_scale=0.01
    )
    vec = table.user_vector("new")
    assert np.all(np.isfinite(vec))
    assert np.max(np.abs(vec)) <= 0.01
    assert report.cold_users == ["new"]


def test_init_new_user_ignores_other_new_users(rng):
    # two new users share an item; neither may bootstrap from the other
    segment = _segment([("n1", "iA"), ("n2", "iA")])
    table = EmbeddingTable(2)
    ta = TemporalAttention.zeros(2)
    report = init_user_embeddings(
        ta, segment, build_user_user_graph(segment), table, rng
    )
    assert set(report.cold_users) == {"n1", "n2"}


def test_init_updates_history_only_for_active_users(rng):
    segment = _segment([("u1", "iA")])
    table = _table_with(["u1", "u2"], [])
    ta = TemporalAttention(np.array([0.5, 0.5]))
    ta.last_seen = {"u1": 1, "u2": 1}
    ta.prev_embeddings = {
        "u1": table.user_vector("u1"),
        "u2": table.user_vector("u2"),
    }
    seg2 = _segment([("u1", "iA")])
    seg2 = type(seg2)(
        index=3,
        start=seg2.start,
        end=seg2.end,
        interactions=seg2.interactions,
        new_users=seg2.new_users,
        new_items=seg2.new_items,
    )
    init_user_embeddings(ta, seg2, build_user_user_graph(seg2), table, rng)
    assert ta.last_seen["u1"] == 3
    assert np.array_equal(ta.prev_embeddings["u1"], table.user_vector("u1"))
    assert ta.last_seen["u2"] == 1  # untouched


def test_init_new_items_added(rng):
    segment = _segment([("u1", "brand_new_item")])
    table = _table_with(["u1"], [])
    ta = TemporalAttention.zeros(2)
    ta.last_seen = {"u1": 0}
    ta.prev_embeddings = {"u1": table.user_vector("u1")}
    report = init_user_embeddings(ta, segment, build_user_user_graph(segment), table, rng)
    assert report.new_items == ["brand_new_item"]
    assert table.has_item("brand_new_item")


def test_plain_init_used_by_baselines(rng):
    segment = _segment([("u1", "iA"), ("u2", "iA")])
    table = _table_with(["u1"], [])
    before = table.user_vector("u1")
    report = init_embeddings_plain(segment, table, rng)
    assert np.array_equal(table.user_vector("u1"), before)
    assert report.new_users == ["u2"]
    assert table.has_item("iA")


# ---------------------------------------------------------------------------
# fitting the shift vector
# ---------------------------------------------------------------------------


def test_fit_single_user_closed_form():
    ta = TemporalAttention.zeros(2)
    observed = {"u": (np.array([1.0, 1.0]), 1, np.array([1.3, 0.8]))}
    w = fit_temporal_attention(ta, observed, ridge=0.0)
    assert np.allclose(w, [0.3, -0.2], atol=1e-12)
    assert np.array_equal(ta.w_ta, w)


def test_fit_zero_residual_gives_zero():
    ta = TemporalAttention.zeros(2)
    e = np.array([0.7, -0.1])
    observed = {"a": (e.copy(), 2, e.copy()), "b": (2 * e, 1, 2 * e)}
    w = fit_temporal_attention(ta, observed, ridge=0.0)
    assert np.array_equal(w, np.zeros(2))


def test_fit_matches_normal_equation_oracle(rng):
    dim = 5
    observed = {}
    for j in range(20):
        prev = rng.normal(size=dim)
        dt = int(rng.integers(1, 6))
        after = rng.normal(size=dim)
        observed[f"u{j}"] = (prev, dt, after)
    ridge = 0.3
    ta = TemporalAttention.zeros(dim)
    w = fit_temporal_attention(ta, observed, ridge=ridge)
    # independent per-coordinate scalar least squares
    for c in range(dim):
        num = 0.0
        den = ridge
        for prev, dt, after in observed.values():
            x = dt * prev[c]
            num += x * (after[c] - prev[c])
            den += x * x
        assert abs(w[c] - num / den) < 1e-10


def test_fit_recovers_generating_vector(rng):
    dim = 4
    w_true = rng.normal(scale=0.2, size=dim)
    observed = {}
    for j in range(30):
        prev = rng.normal(size=dim)
        dt = int(rng.integers(1, 4))
        after = prev + (w_true * dt) * prev
        observed[f"u{j}"] = (prev, dt, after)
    ta = TemporalAttention.zeros(dim)
    w = fit_temporal_attention(ta, observed, ridge=0.0)
    assert np.allclose(w, w_true, atol=1e-8)


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        fit_temporal_attention(TemporalAttention.zeros(2), {}, 0.0)


def test_refresh_history_points_at_trained_values():
    table = _table_with(["u1"], [])
    ta = TemporalAttention.zeros(2)
    ta.prev_embeddings["u1"] = np.zeros(2)
    table.set_user("u1", [4.0, 5.0])
    refresh_history(ta, table, ["u1"])
    assert np.array_equal(ta.prev_embeddings["u1"], [4.0, 5.0])
