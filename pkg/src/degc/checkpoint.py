"""Versioned single-file model checkpoints.

Layout: a magic line, a JSON header carrying structure (variant, widths,
id lists, temporal history) and the byte length of each array, then the
arrays themselves as row-major little-endian float64. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ConvLayer, EmbeddingTable, GcnModel
from .temporal import TemporalAttention

MAGIC = b"DEGC-CKPT v1\n"


def _array_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(
    path: str | Path,
    model: GcnModel,
    table: EmbeddingTable,
    ta: TemporalAttention | None = None,
) -> None:
    arrays: list[np.ndarray] = []

    def register(arr: np.ndarray) -> dict:
        arrays.append(arr)
        return {"shape": list(arr.shape)}

    header: dict = {
        "variant": model.variant,
        "embedding_dim": model.embedding_dim,
        "widths": list(model.widths),
        "user_ids": table.user_ids,
        "item_ids": table.item_ids,
        "user_embeddings": register(table.user_matrix),
        "item_embeddings": register(table.item_matrix),
        "layers": [
            {
                "user_weights": register(layer.user_weights),
                "item_weights": register(layer.item_weights),
            }
            for layer in model.layers
        ],
    }
    if ta is not None:
        history_ids = sorted(ta.prev_embeddings, key=str)
        header["temporal"] = {
            "w_ta": register(ta.w_ta),
            "history_ids": history_ids,
            "last_seen": [ta.last_seen[u] for u in history_ids],
            "prev_embeddings": register(
                np.stack([ta.prev_embeddings[u] for u in history_ids])
                if history_ids
                else np.zeros((0, table.dim))
            ),
        }

    payload = b"".join(_array_bytes(a) for a in arrays)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(header_bytes)
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(
    path: str | Path,
) -> tuple[GcnModel, EmbeddingTable, TemporalAttention | None]:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"not a checkpoint file: {path}")
    rest = blob[len(MAGIC) :]
    newline = rest.index(b"\n")
    header = json.loads(rest[:newline].decode("utf-8"))
    payload = rest[newline + 1 :]

    cursor = 0

    def take(meta: dict) -> np.ndarray:
        nonlocal cursor
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=cursor
        ).reshape(shape)
        cursor += count * 8
        return arr.astype(float)

    dim = header["embedding_dim"]
    user_emb = take(header["user_embeddings"])
    item_emb = take(header["item_embeddings"])
    table = EmbeddingTable(dim)
    for uid, row in zip(header["user_ids"], user_emb):
        table.add_user(uid, row)
    for iid, row in zip(header["item_ids"], item_emb):
        table.add_item(iid, row)

    layers = [
        ConvLayer(take(spec["user_weights"]), take(spec["item_weights"]))
        for spec in header["layers"]
    ]
    model = GcnModel(dim, layers, header["variant"])

    ta = None
    if "temporal" in header:
        spec = header["temporal"]
        w_ta = take(spec["w_ta"])
        prev = take(spec["prev_embeddings"])
        ta = TemporalAttention(
            w_ta,
            dict(zip(spec["history_ids"], spec["last_seen"])),
            {u: prev[i].copy() for i, u in enumerate(spec["history_ids"])},
        )
    return model, table, ta
