"""Top-K ranking metrics and per-segment / stream-level evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import EmbeddingTable, GcnModel, GraphOps, build_graph_ops, forward_cache
from .stream import BipartiteGraph, Interaction, NodeId, Segment, SplitData


def recall_at_k(ranked_items: Sequence[NodeId], test_items: set, k: int) -> float:
    """|top-k hits| / |test items|."""
    if not test_items:
        raise ValueError("empty test set")
    hits = sum(1 for item in ranked_items[:k] if item in test_items)
    return hits / len(test_items)


def ndcg_at_k(ranked_items: Sequence[NodeId], test_items: set, k: int) -> float:
    """Binary-relevance NDCG: rank-r hits gain 1/log2(r+1), normalized by the ideal."""
    if not test_items:
        raise ValueError("empty test set")
    dcg = 0.0
    for rank, item in enumerate(ranked_items[:k], start=1):
        if item in test_items:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = min(len(test_items), k)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, ideal + 1))
    return dcg / idcg


@dataclass(frozen=True)
class SegmentMetrics:
    segment_index: int
    recall: float
    ndcg: float
    n_evaluated_users: int
    k: int


def interactions_by_user(interactions: Sequence[Interaction]) -> dict[NodeId, set]:
    grouped: dict[NodeId, set] = {}
    for x in interactions:
        grouped.setdefault(x.user_id, set()).add(x.item_id)
    return grouped


def ranking_metrics(
    model: GcnModel,
    table: EmbeddingTable,
    ops: GraphOps,
    test_by_user: Mapping[NodeId, set],
    exclude_by_user: Mapping[NodeId, set],
    candidate_items: Sequence[NodeId],
    k: int,
) -> tuple[float, float, int]:
    """Mean recall@k / NDCG@k over users with at least one scoreable test item.

    Each user ranks the candidate items minus their excluded (training)
    items; ranking is by inner-product score with stable tie-breaking on
    candidate order, so the result is independent of user iteration order.
    """
    candidates = sorted({i for i in candidate_items if table.has_item(i)}, key=str)
    users = sorted((u for u in test_by_user if table.has_user(u)), key=str)
    if not candidates or not users:
        return 0.0, 0.0, 0
    cache = forward_cache(model, table, ops)
    ru, ri = cache.user_reps(), cache.item_reps()
    cand_rows = np.array([table.item_row(i) for i in candidates], dtype=int)
    cand_pos = {item: p for p, item in enumerate(candidates)}
    item_reps = ri[cand_rows]

    recall_sum = 0.0
    ndcg_sum = 0.0
    evaluated = 0
    for user in users:
        test_items = {i for i in test_by_user[user] if i in cand_pos}
        if not test_items:
            continue
        scores = item_reps @ ru[table.user_row(user)]
        for item in exclude_by_user.get(user, ()):
            pos = cand_pos.get(item)
            if pos is not None:
                scores[pos] = -np.inf
        order = np.argsort(-scores, kind="stable")[:k]
        ranked = [candidates[i] for i in order]
        recall_sum += recall_at_k(ranked, test_items, k)
        ndcg_sum += ndcg_at_k(ranked, test_items, k)
        evaluated += 1
    if evaluated == 0:
        return 0.0, 0.0, 0
    return recall_sum / evaluated, ndcg_sum / evaluated, evaluated


def evaluate_segment(
    model: GcnModel,
    table: EmbeddingTable,
    splits: SplitData,
    candidate_items: Sequence[NodeId],
    k: int,
    graph: BipartiteGraph,
    segment_index: int = 0,
) -> SegmentMetrics:
    """Score the segment's test split against the accumulated item catalog.

    `graph` is the segment's training graph; users absent from it are
    still scored through their embeddings with zero neighbor input.
    """
    test_by_user = interactions_by_user(splits.test)
    if not test_by_user:
        raise ValueError("no users with test interactions")
    exclude = interactions_by_user(splits.train)
    ops = build_graph_ops(graph, table)
    recall, ndcg, n = ranking_metrics(
        model, table, ops, test_by_user, exclude, candidate_items, k
    )
    return SegmentMetrics(segment_index, recall, ndcg, n, k)


@dataclass(frozen=True)
class StreamSummary:
    mean_recall: float
    mean_ndcg: float
    series: tuple[SegmentMetrics, ...]


def aggregate_stream(metrics: Sequence[SegmentMetrics]) -> StreamSummary:
    """Unweighted mean over segments, keeping the per-segment series."""
    if not metrics:
        raise ValueError("no segment metrics to aggregate")
    return StreamSummary(
        mean_recall=float(np.mean([m.recall for m in metrics])),
        mean_ndcg=float(np.mean([m.ndcg for m in metrics])),
        series=tuple(metrics),
    )


def run_static_degradation(
    segments: Sequence[Segment],
    variant: str,
    embedding_dim: int,
    widths: Sequence[int],
    train_cfg,
    k: int = 20,
    seed: int = 0,
    lambda2: float = 0.01,
    init_scale: float = 0.01,
) -> list[SegmentMetrics]:
    """Train on segment 1 only, then evaluate the frozen model downstream.

    Later segments contribute their own train graph to the forward pass
    (the weights stay fixed); unseen users and items receive fallback
    embeddings so evaluation remains total.
    """
    from .experiment import train_from_scratch  # local import to avoid a cycle

    if len(segments) < 3:
        raise ValueError("need at least 3 segments")
    from .stream import build_bipartite_graph, split_segment
    from .temporal import init_embeddings_plain

    first = segments[0]
    splits = split_segment(first, seed=seed)
    model, table, _ = train_from_scratch(
        variant,
        embedding_dim,
        widths,
        splits,
        train_cfg,
        seed=seed,
        k=k,
        lambda2=lambda2,
        init_scale=init_scale,
        phase="static_train",
    )
    known_items = set(first.items())
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(999,)))
    out: list[SegmentMetrics] = []
    for segment in segments[1:]:
        init_embeddings_plain(segment, table, rng, init_scale)
        known_items |= segment.items()
        seg_splits = split_segment(segment, seed=seed + segment.index)
        graph = build_bipartite_graph(seg_splits.train)
        m = evaluate_segment(model, table, seg_splits, sorted(known_items), k, graph)
        out.append(
            SegmentMetrics(segment.index, m.recall, m.ndcg, m.n_evaluated_users, k)
        )
    return out
