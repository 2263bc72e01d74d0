import numpy as np
import pytest

from degc.checkpoint import load_checkpoint, save_checkpoint
from degc.temporal import TemporalAttention

from conftest import tiny_model_and_graph


def test_round_trip_bit_exact(tmp_path, rng):
    model, table, _, _ = tiny_model_and_graph(seed=30, dim=4, widths=(3, 2))
    ta = TemporalAttention(rng.normal(size=4))
    ta.last_seen = {"u0": 1, "u2": 3}
    ta.prev_embeddings = {"u0": rng.normal(size=4), "u2": rng.normal(size=4)}
    path = tmp_path / "model.degc"
    save_checkpoint(path, model, table, ta)
    model2, table2, ta2 = load_checkpoint(path)

    assert model2.variant == model.variant
    assert model2.widths == model.widths
    assert model2.embedding_dim == model.embedding_dim
    for a, b in zip(model.layers, model2.layers):
        assert np.array_equal(a.user_weights, b.user_weights)
        assert np.array_equal(a.item_weights, b.item_weights)
    assert table2.user_ids == table.user_ids
    assert table2.item_ids == table.item_ids
    assert np.array_equal(table2.user_matrix, table.user_matrix)
    assert np.array_equal(table2.item_matrix, table.item_matrix)
    assert ta2.last_seen == ta.last_seen
    assert np.array_equal(ta2.w_ta, ta.w_ta)
    for user, vec in ta.prev_embeddings.items():
        assert np.array_equal(ta2.prev_embeddings[user], vec)


def test_round_trip_without_temporal_state(tmp_path):
    model, table, _, _ = tiny_model_and_graph(seed=31)
    path = tmp_path / "model.degc"
    save_checkpoint(path, model, table)
    _, _, ta = load_checkpoint(path)
    assert ta is None


def test_save_load_save_is_byte_stable(tmp_path):
    model, table, _, _ = tiny_model_and_graph(seed=32)
    ta = TemporalAttention(np.array([0.5] * model.embedding_dim))
    a = tmp_path / "a.degc"
    b = tmp_path / "b.degc"
    save_checkpoint(a, model, table, ta)
    save_checkpoint(b, *load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_integer_ids_survive(tmp_path, rng):
    from degc.model import EmbeddingTable, init_model

    table = EmbeddingTable(2)
    table.add_user(7, [1.0, 2.0])
    table.add_item(9, [3.0, 4.0])
    model = init_model("lightgcn_dense", 2, [2], rng)
    path = tmp_path / "ids.degc"
    save_checkpoint(path, model, table)
    _, table2, _ = load_checkpoint(path)
    assert table2.user_ids == [7]
    assert table2.has_item(9)


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.degc"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
