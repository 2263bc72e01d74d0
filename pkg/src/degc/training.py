"""Shared optimization machinery for every training phase.

One loop serves all phases: seeded epoch shuffling, BPR batches with
rejection-sampled negatives, bias-corrected Adam on a masked parameter
subset, proximal shrinkage (soft-threshold / block soft-threshold) that
produces exact zeros, and early stopping on a validation ranking metric
with best-epoch restoration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics as metrics_mod
from .model import (
    Batch,
    EmbeddingTable,
    GcnModel,
    GraphOps,
    RegSpec,
    build_graph_ops,
    conv_zero_fraction,
    get_param,
    gradient,
)
from .stream import BipartiteGraph, Interaction, NodeId


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1000
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    negatives_per_positive: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")


@dataclass
class AdamState:
    """Moment mirrors for one masked parameter set; owned by a single phase."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    mask: Mapping[str, np.ndarray],
) -> None:
    """Bias-corrected Adam update, in place, on masked entries only."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise RuntimeError(f"non-finite gradient for {key!r} ({bad} entries)")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for key, g in grads.items():
        if key not in state.m:
            state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        state.m[key] = b1 * state.m[key] + (1.0 - b1) * g
        state.v[key] = b2 * state.v[key] + (1.0 - b2) * g**2
        m_hat = state.m[key] / correction1
        v_hat = state.v[key] / correction2
        delta = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        params[key] -= np.where(mask[key], delta, 0.0)


def prox_l1(values: np.ndarray, threshold: float) -> np.ndarray:
    """Soft-threshold: sign(w) * max(|w| - threshold, 0); exact zeros inside the band."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if threshold == 0:
        return values.copy()
    return np.sign(values) * np.maximum(np.abs(values) - threshold, 0.0)


def prox_group(vector: np.ndarray, threshold: float) -> np.ndarray:
    """Block soft-threshold: scale by max(1 - threshold/||v||, 0)."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    norm = float(np.linalg.norm(vector))
    if norm <= threshold:
        return np.zeros_like(vector)
    return vector * (1.0 - threshold / norm)


# ---------------------------------------------------------------------------
# BPR batch sampling
# ---------------------------------------------------------------------------


def _train_item_sets(interactions: Sequence[Interaction]) -> dict[NodeId, set]:
    sets: dict[NodeId, set] = {}
    for x in interactions:
        sets.setdefault(x.user_id, set()).add(x.item_id)
    return sets


def _draw_negative(
    user_items: set, universe: list[NodeId], rng: np.random.Generator, max_tries: int = 50
) -> NodeId | None:
    for _ in range(max_tries):
        candidate = universe[int(rng.integers(len(universe)))]
        if candidate not in user_items:
            return candidate
    # Rejection cannot succeed when the user saw every item.
    if len(user_items) >= len(universe):
        return None
    outside = [i for i in universe if i not in user_items]
    return outside[int(rng.integers(len(outside)))]


class BatchSample(tuple):
    pass


def sample_bpr_batch(
    interactions: Sequence[Interaction],
    graph: BipartiteGraph,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[list[tuple[NodeId, NodeId, NodeId]], int]:
    """Uniform positives with one rejection-sampled negative each.

    Negatives are uniform over the graph's item universe minus the user's
    training items. Users who interacted with every item yield no triple;
    the count of such skips is returned alongside the batch.
    """
    if not interactions:
        raise ValueError("no interactions to sample from")
    universe = graph.items()
    if not universe:
        raise ValueError("empty item universe")
    user_items = _train_item_sets(interactions)
    triples: list[tuple[NodeId, NodeId, NodeId]] = []
    skipped = 0
    picks = rng.integers(len(interactions), size=batch_size)
    for p in picks:
        row = interactions[int(p)]
        neg = _draw_negative(user_items[row.user_id], universe, rng)
        if neg is None:
            skipped += 1
            continue
        triples.append((row.user_id, row.item_id, neg))
    return triples, skipped


def _triples_to_batch(
    triples: Sequence[tuple[NodeId, NodeId, NodeId]], table: EmbeddingTable
) -> Batch:
    users = np.array([table.user_row(u) for u, _, _ in triples], dtype=int)
    pos = np.array([table.item_row(i) for _, i, _ in triples], dtype=int)
    neg = np.array([table.item_row(i) for _, _, i in triples], dtype=int)
    return Batch(users, pos, neg)


# ---------------------------------------------------------------------------
# the shared phase loop
# ---------------------------------------------------------------------------


@dataclass
class PhaseResult:
    phase: str
    epochs_run: int
    best_epoch: int
    best_val_metric: float
    final_train_loss: float
    trace: list[dict]


def _apply_prox(
    model: GcnModel,
    table: EmbeddingTable,
    mask: Mapping[str, np.ndarray],
    reg: RegSpec,
    lr: float,
) -> None:
    if reg.l1_weights > 0:
        threshold = lr * reg.l1_weights
        for key, m in mask.items():
            if not key.startswith("W"):
                continue
            value = get_param(model, table, key)
            value[:] = np.where(m, prox_l1(value, threshold), value)
    if reg.group_weight > 0 and reg.groups:
        threshold = lr * reg.group_weight
        for layer_idx, row in reg.groups:
            layer = model.layers[layer_idx - 1]
            joint = np.concatenate([layer.user_weights[row], layer.item_weights[row]])
            shrunk = prox_group(joint, threshold)
            half = layer.user_weights.shape[1]
            layer.user_weights[row] = shrunk[:half]
            layer.item_weights[row] = shrunk[half:]


def train_phase(
    model: GcnModel,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    train_interactions: Sequence[Interaction],
    val_interactions: Sequence[Interaction],
    mask: Mapping[str, np.ndarray],
    reg: RegSpec,
    cfg: TrainConfig,
    phase: str,
    k: int = 20,
    candidate_items: Sequence[NodeId] | None = None,
    val_metric: Callable[[], float] | None = None,
) -> PhaseResult:
    """Run one masked training phase in place and keep the best-validation epoch.

    Per epoch: seeded shuffle of the training interactions, BPR + l2
    gradient steps through Adam, then proximal shrinkage of the
    regularized masked subset. Early stopping watches validation
    recall@k (or -train_loss when no validation users exist), with
    `patience` epochs of grace. When max_epochs is 0 the call is a no-op.
    """
    if cfg.max_epochs == 0 or not mask:
        return PhaseResult(phase, 0, 0, float("-inf"), float("nan"), [])
    if not train_interactions:
        raise ValueError("empty training data")

    ops = build_graph_ops(graph, table)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(cfg.learning_rate)
    user_items = _train_item_sets(train_interactions)
    universe = graph.items()

    if val_metric is None:
        if candidate_items is None:
            candidate_items = universe
        val_by_user = metrics_mod.interactions_by_user(val_interactions)
        if val_by_user:
            def val_metric() -> float:
                return metrics_mod.ranking_metrics(
                    model, table, ops, val_by_user, user_items, candidate_items, k
                )[0]
        else:
            def val_metric() -> float:
                return float("nan")  # sentinel: fall back to train loss

    order_source = list(train_interactions)
    best_metric = float("-inf")
    prev_best = float("-inf")
    best_epoch = 0
    best_snapshot: dict[str, np.ndarray] = {}
    bad_streak = 0
    trace: list[dict] = []
    epoch_loss = float("nan")
    epochs_run = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        perm = rng.permutation(len(order_source))
        losses = []
        for lo in range(0, len(perm), cfg.batch_size):
            chunk = perm[lo : lo + cfg.batch_size]
            triples = []
            for idx in chunk:
                row = order_source[int(idx)]
                for _ in range(cfg.negatives_per_positive):
                    neg = _draw_negative(user_items[row.user_id], universe, rng)
                    if neg is not None:
                        triples.append((row.user_id, row.item_id, neg))
            if not triples:
                continue
            batch = _triples_to_batch(triples, table)
            loss, grads = gradient(model, table, ops, batch, mask, reg)
            params = {key: get_param(model, table, key) for key in grads}
            adam_step(params, grads, adam, mask)
            _apply_prox(model, table, mask, reg, cfg.learning_rate)
            losses.append(loss)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        metric = val_metric()
        if np.isnan(metric):
            metric = -epoch_loss
        trace.append(
            {
                "phase": phase,
                "epoch": epoch,
                "train_loss": epoch_loss,
                "val_recall": metric,
                "zero_fraction": conv_zero_fraction(model),
            }
        )
        if metric >= best_metric:
            # ties keep the later epoch (proximal steps keep sharpening
            # zeros on plateaus) but still count toward patience
            best_metric = metric
            best_epoch = epoch
            best_snapshot = {
                key: get_param(model, table, key).copy() for key in mask
            }
        if metric > prev_best:
            bad_streak = 0
            prev_best = metric
        else:
            bad_streak += 1
            if bad_streak >= cfg.patience:
                break

    if best_snapshot:
        for key, value in best_snapshot.items():
            get_param(model, table, key)[:] = value
    return PhaseResult(phase, epochs_run, best_epoch, best_metric, epoch_loss, trace)
