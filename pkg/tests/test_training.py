import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from degc.model import (
    Batch,
    RegSpec,
    build_graph_ops,
    full_mask,
    get_param,
    gradient,
    param_keys,
)
from degc.training import (
    AdamState,
    TrainConfig,
    adam_step,
    prox_group,
    prox_l1,
    sample_bpr_batch,
    train_phase,
)
from degc.stream import build_bipartite_graph

from conftest import make_interactions, tiny_model_and_graph


# ---------------------------------------------------------------------------
# proximal operators
# ---------------------------------------------------------------------------


def test_prox_l1_hand_cases():
    assert prox_l1(np.array([0.0005]), 0.001)[0] == 0.0
    assert abs(prox_l1(np.array([-0.01]), 0.001)[0] - (-0.009)) < 1e-12
    values = np.array([0.3, -0.2, 0.0])
    assert np.array_equal(prox_l1(values, 0.0), values)


def test_prox_l1_is_the_shrinkage_minimizer(rng):
    # prox(w) minimizes 0.5 (x - w)^2 + t |x|; compare against a fine grid
    for w in rng.normal(scale=0.02, size=8):
        t = 0.005
        xs = np.linspace(-0.1, 0.1, 20001)
        objective = 0.5 * (xs - w) ** 2 + t * np.abs(xs)
        best = xs[np.argmin(objective)]
        assert abs(prox_l1(np.array([w]), t)[0] - best) < 1e-4


def test_prox_group_hand_cases(rng):
    v = rng.normal(size=5)
    v *= 0.5 / np.linalg.norm(v)
    assert np.array_equal(prox_group(v, 0.6), np.zeros(5))
    v = rng.normal(size=5)
    v /= np.linalg.norm(v)
    shrunk = prox_group(v, 0.6)
    assert abs(np.linalg.norm(shrunk) - 0.4) < 1e-12
    # direction preserved
    assert np.allclose(shrunk / np.linalg.norm(shrunk), v, atol=1e-12)
    assert np.array_equal(prox_group(v, 0.0), v)


@settings(deadline=None, max_examples=50)
@given(
    vec=st.lists(st.floats(-10, 10), min_size=1, max_size=8),
    threshold=st.floats(0, 5),
)
def test_prox_group_never_grows_or_flips(vec, threshold):
    v = np.array(vec)
    out = prox_group(v, threshold)
    assert np.linalg.norm(out) <= np.linalg.norm(v) + 1e-12
    assert np.dot(out, v) >= 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    params = {"w": np.array([1.0, -2.0])}
    mask = {"w": np.ones(2, dtype=bool)}
    state = AdamState(learning_rate=0.1)
    adam_step(params, {"w": np.zeros(2)}, state, mask)
    assert np.array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_matches_hand_formula():
    g = 0.37
    lr = 0.05
    params = {"w": np.array([0.0])}
    mask = {"w": np.ones(1, dtype=bool)}
    state = AdamState(learning_rate=lr)
    adam_step(params, {"w": np.array([g])}, state, mask)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g**2) / (1 - 0.999)
    expected = -lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(params["w"][0] - expected) < 1e-15


def test_adam_deterministic_trajectories(rng):
    grads = [rng.normal(size=3) for _ in range(5)]

    def run():
        params = {"w": np.zeros(3)}
        state = AdamState(learning_rate=0.01)
        mask = {"w": np.ones(3, dtype=bool)}
        for g in grads:
            adam_step(params, {"w": g.copy()}, state, mask)
        return params["w"]

    assert np.array_equal(run(), run())


def test_adam_masked_entries_bit_unchanged(rng):
    params = {"w": rng.normal(size=4)}
    before = params["w"].copy()
    mask = {"w": np.array([True, False, True, False])}
    state = AdamState(learning_rate=0.1)
    g = np.where(mask["w"], rng.normal(size=4), 0.0)
    adam_step(params, {"w": g}, state, mask)
    assert np.array_equal(params["w"][[1, 3]], before[[1, 3]])


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    state = AdamState(learning_rate=0.1)
    with pytest.raises(RuntimeError, match="non-finite"):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, state, {"w": np.ones(2, bool)})


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def test_negative_rejection_correctness(rng):
    rows = make_interactions([("u", "i0")])
    graph = build_bipartite_graph(make_interactions([("u", "i0"), ("v", "i1"), ("v", "i2")]))
    triples, skipped = sample_bpr_batch(rows, graph, 200, rng)
    assert skipped == 0
    assert all(t[0] == "u" and t[1] == "i0" and t[2] in {"i1", "i2"} for t in triples)


def test_batch_size_honored(rng):
    # each user sees 3 of the 7 items, so negatives always exist
    pairs = [(f"u{u}", f"i{(u + shift) % 7}") for u in range(5) for shift in (0, 1, 2)]
    rows = make_interactions(pairs)
    graph = build_bipartite_graph(rows)
    triples, skipped = sample_bpr_batch(rows, graph, 1000, rng)
    assert len(triples) == 1000
    assert skipped == 0


def test_exhausted_user_skipped_and_reported(rng):
    # one user interacted with the entire catalog
    rows = make_interactions([("u", "i0"), ("u", "i1")])
    graph = build_bipartite_graph(rows)
    triples, skipped = sample_bpr_batch(rows, graph, 50, rng)
    assert triples == []
    assert skipped == 50


def test_negative_uniformity_chi_squared():
    rng = np.random.default_rng(99)
    rows = make_interactions([("u", "i0")])
    universe = [("u", "i0")] + [("v", f"i{j}") for j in range(1, 10)]
    graph = build_bipartite_graph(make_interactions(universe))
    triples, _ = sample_bpr_batch(rows, graph, 10_000, rng)
    counts = {}
    for _, _, neg in triples:
        counts[neg] = counts.get(neg, 0) + 1
    observed = [counts.get(f"i{j}", 0) for j in range(1, 10)]
    assert stats.chisquare(observed).pvalue > 0.01


# ---------------------------------------------------------------------------
# the shared phase loop
# ---------------------------------------------------------------------------


def _phase_fixture(seed=0):
    model, table, graph, interactions = tiny_model_and_graph(seed=seed, dim=3, widths=(3, 2))
    train = interactions[: len(interactions) * 3 // 4]
    val = interactions[len(interactions) * 3 // 4 :]
    return model, table, graph, train, val


def test_zero_epochs_is_a_noop():
    model, table, graph, train, val = _phase_fixture()
    before = [layer.user_weights.copy() for layer in model.layers]
    cfg = TrainConfig(max_epochs=0, patience=0, seed=1)
    result = train_phase(
        model, table, graph, train, val, full_mask(model, table), RegSpec(), cfg, phase="noop"
    )
    assert result.trace == []
    for layer, saved in zip(model.layers, before):
        assert np.array_equal(layer.user_weights, saved)


def test_empty_mask_is_a_noop():
    model, table, graph, train, val = _phase_fixture()
    before = model.layers[0].user_weights.copy()
    cfg = TrainConfig(max_epochs=3, patience=1, seed=1)
    result = train_phase(model, table, graph, train, val, {}, RegSpec(), cfg, phase="noop")
    assert result.epochs_run == 0
    assert np.array_equal(model.layers[0].user_weights, before)


def test_empty_training_data_rejected():
    model, table, graph, _, val = _phase_fixture()
    cfg = TrainConfig(max_epochs=2, patience=1, seed=1)
    with pytest.raises(ValueError, match="empty training data"):
        train_phase(model, table, graph, [], val, full_mask(model, table), RegSpec(), cfg, phase="x")


def test_patience_one_returns_first_epoch_params():
    model, table, graph, train, val = _phase_fixture()
    scripted = iter([0.9, 0.5, 0.4, 0.3])
    cfg = TrainConfig(max_epochs=10, patience=1, seed=1)
    snapshot = {}

    def fake_metric():
        value = next(scripted)
        if not snapshot:
            snapshot["epoch1"] = model.layers[1].user_weights.copy()
        return value

    result = train_phase(
        model,
        table,
        graph,
        train,
        val,
        full_mask(model, table, layers=[2]),
        RegSpec(),
        cfg,
        phase="scripted",
        val_metric=fake_metric,
    )
    assert result.epochs_run == 2
    assert result.best_epoch == 1
    assert np.array_equal(model.layers[1].user_weights, snapshot["epoch1"])


def test_phase_trains_only_masked_params():
    model, table, graph, train, val = _phase_fixture()
    frozen_layer = model.layers[0].user_weights.copy()
    frozen_emb = table.user_matrix.copy()
    cfg = TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=3, patience=3, seed=2)
    train_phase(
        model,
        table,
        graph,
        train,
        val,
        full_mask(model, table, layers=[2]),
        RegSpec(l1_weights=0.001),
        cfg,
        phase="top",
    )
    assert np.array_equal(model.layers[0].user_weights, frozen_layer)
    assert np.array_equal(table.user_matrix, frozen_emb)


def test_full_batch_loss_decreases():
    model, table, graph, train, val = _phase_fixture(seed=3)
    cfg = TrainConfig(learning_rate=0.01, batch_size=len(train), max_epochs=12, patience=12, seed=3)
    result = train_phase(
        model,
        table,
        graph,
        train,
        val,
        full_mask(model, table, embeddings=True),
        RegSpec(l2_embeddings=0.001),
        cfg,
        phase="full",
    )
    losses = [entry["train_loss"] for entry in result.trace]
    assert losses[-1] < losses[0]


def test_monotone_descent_on_fixed_full_batch(rng):
    # pure optimization sanity: fixed triples, lambda1 = 0, loss never increases
    model, table, graph, _, _ = _phase_fixture(seed=4)
    ops = build_graph_ops(graph, table)
    users = np.array([0, 1, 2, 3])
    pos = np.array([0, 1, 2, 3])
    neg = np.array([4, 3, 4, 0])
    batch = Batch(users, pos, neg)
    mask = full_mask(model, table, embeddings=True)
    state = AdamState(learning_rate=0.002)
    losses = []
    for _ in range(25):
        loss, grads = gradient(model, table, ops, batch, mask, RegSpec())
        losses.append(loss)
        params = {key: get_param(model, table, key) for key in grads}
        adam_step(params, grads, state, mask)
    for a, b in zip(losses, losses[1:]):
        assert b <= a + 1e-9


def test_monotone_l1_shrinkage_with_zero_gradient():
    # pure proximal descent: zero BPR gradient, the l1 norm never grows
    model, table, graph, train, val = _phase_fixture(seed=5)
    mask = full_mask(model, table)
    state = AdamState(learning_rate=0.01)
    norms = []
    for _ in range(10):
        grads = {key: np.zeros_like(get_param(model, table, key)) for key in mask}
        params = {key: get_param(model, table, key) for key in grads}
        adam_step(params, grads, state, mask)
        for key in mask:
            value = get_param(model, table, key)
            value[:] = prox_l1(value, 0.01 * 0.05)
        norms.append(sum(np.abs(get_param(model, table, key)).sum() for key in mask))
    for a, b in zip(norms, norms[1:]):
        assert b <= a + 1e-15


def test_seeded_determinism_of_trajectories():
    def run():
        model, table, graph, train, val = _phase_fixture(seed=6)
        cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=4, patience=4, seed=9)
        train_phase(
            model,
            table,
            graph,
            train,
            val,
            full_mask(model, table, embeddings=True),
            RegSpec(l1_weights=0.001, l2_embeddings=0.01),
            cfg,
            phase="determinism",
        )
        return [layer.user_weights.copy() for layer in model.layers] + [table.user_matrix.copy()]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=2, patience=5)
