"""Per-user temporal preference shift and segment-start embedding init.

An existing user's embedding is advanced by a shift vector: elapsed
segments scaled through a learned per-coordinate vector and Hadamard-
multiplied with the user's previous embedding. New users start from the
mean of their existing one-hop neighbors on the segment's user-user
graph; cold nodes fall back to a small uniform init. The shift vector is
refit after each segment by per-coordinate ridge regression against the
embedding movements actually observed during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .model import EmbeddingTable
from .stream import NodeId, Segment, UserUserGraph


@dataclass
class TemporalAttention:
    w_ta: np.ndarray
    last_seen: dict[NodeId, int] = field(default_factory=dict)
    prev_embeddings: dict[NodeId, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, dim: int) -> "TemporalAttention":
        return cls(np.zeros(dim))

    def copy(self) -> "TemporalAttention":
        return TemporalAttention(
            self.w_ta.copy(),
            dict(self.last_seen),
            {u: e.copy() for u, e in self.prev_embeddings.items()},
        )


def estimate_shift(ta: TemporalAttention, user: NodeId, t: int) -> np.ndarray:
    """Shift = (w_ta * elapsed_segments) ⊙ previous embedding."""
    if user not in ta.last_seen:
        raise KeyError(f"user has no history: {user!r}")
    dt = t - ta.last_seen[user]
    return (ta.w_ta * dt) * ta.prev_embeddings[user]


@dataclass
class InitReport:
    """What segment-start initialization did, and the raw material for refitting."""

    observations: dict[NodeId, tuple[np.ndarray, int]]  # user -> (prev embedding, dt)
    shifted_users: list[NodeId]
    new_users: list[NodeId]
    cold_users: list[NodeId]
    new_items: list[NodeId]


def init_user_embeddings(
    ta: TemporalAttention,
    segment: Segment,
    user_user_graph: UserUserGraph,
    table: EmbeddingTable,
    rng: np.random.Generator,
    fallback_scale: float = 0.01,
) -> InitReport:
    """Initialize this segment's embeddings in place.

    Existing active users move by their estimated shift; new users average
    their already-shifted existing neighbors, falling back to
    uniform(-fallback_scale, fallback_scale) when no existing neighbor is
    present (likewise for unseen items). History records of every user
    active at t are updated; inactive users are untouched.
    """
    t = segment.index
    active = sorted(segment.users(), key=str)
    existing = [u for u in active if u in ta.last_seen]
    new_users = [u for u in active if u not in ta.last_seen]

    observations: dict[NodeId, tuple[np.ndarray, int]] = {}
    for user in existing:
        prev = ta.prev_embeddings[user]
        dt = t - ta.last_seen[user]
        observations[user] = (prev.copy(), dt)
        table.set_user(user, prev + estimate_shift(ta, user, t))

    existing_set = set(existing)
    cold_users: list[NodeId] = []
    for user in new_users:
        neighbors = [
            v for v in user_user_graph.neighbors.get(user, ()) if v in existing_set
        ]
        if neighbors:
            vec = np.mean([table.user_vector(v) for v in neighbors], axis=0)
        else:
            vec = rng.uniform(-fallback_scale, fallback_scale, table.dim)
            cold_users.append(user)
        if table.has_user(user):
            table.set_user(user, vec)
        else:
            table.add_user(user, vec)

    new_items = [i for i in sorted(segment.items(), key=str) if not table.has_item(i)]
    for item in new_items:
        table.add_item(item, rng.uniform(-fallback_scale, fallback_scale, table.dim))

    for user in active:
        ta.last_seen[user] = t
        ta.prev_embeddings[user] = table.user_vector(user)
    return InitReport(observations, existing, new_users, cold_users, new_items)


def init_embeddings_plain(
    segment: Segment,
    table: EmbeddingTable,
    rng: np.random.Generator,
    fallback_scale: float = 0.01,
) -> InitReport:
    """Baseline init: inherit existing embeddings untouched, cold-start the rest."""
    new_users = [u for u in sorted(segment.users(), key=str) if not table.has_user(u)]
    for user in new_users:
        table.add_user(user, rng.uniform(-fallback_scale, fallback_scale, table.dim))
    new_items = [i for i in sorted(segment.items(), key=str) if not table.has_item(i)]
    for item in new_items:
        table.add_item(item, rng.uniform(-fallback_scale, fallback_scale, table.dim))
    return InitReport({}, [], new_users, new_users, new_items)


def fit_temporal_attention(
    ta: TemporalAttention,
    observed: Mapping[NodeId, tuple[np.ndarray, int, np.ndarray]],
    ridge: float = 0.0,
) -> np.ndarray:
    """Closed-form per-coordinate ridge fit of the shift vector.

    Each observation is (embedding at the user's previous segment, elapsed
    segments, embedding after training at t); the fit minimizes
    sum_u ||(w * dt_u) ⊙ e_prev_u - (e_t_u - e_prev_u)||^2 + ridge ||w||^2.
    """
    if not observed:
        raise ValueError("no observations to fit")
    users = sorted(observed, key=str)
    prev = np.stack([observed[u][0] for u in users])
    dts = np.array([observed[u][1] for u in users], dtype=float)
    after = np.stack([observed[u][2] for u in users])
    x = dts[:, None] * prev
    numer = np.sum(x * (after - prev), axis=0)
    denom = np.sum(x**2, axis=0) + ridge
    w = np.divide(numer, denom, out=np.zeros_like(numer), where=denom > 0)
    ta.w_ta = w
    return w


def refresh_history(ta: TemporalAttention, table: EmbeddingTable, users) -> None:
    """Point the history records of the given users at their trained embeddings."""
    for user in users:
        ta.prev_embeddings[user] = table.user_vector(user)
