"""Per-segment model surgery: sparsify, disentangle, prune, expand, refit.

The per-segment pipeline separates long-term from outdated short-term
preference parameters: the topmost layer is reinitialized and trained
under an L1 penalty on the new interaction graph, a breadth-first
connectivity sweep marks filters in the lower layers with no surviving
path to the top, those are removed, the survivors are refined, every
layer is widened by fresh filters trained under L1 plus group-sparse
shrinkage, all-zero additions are removed again, and the whole model plus
embeddings is finetuned jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .metrics import SegmentMetrics, evaluate_segment
from .model import (
    ConvLayer,
    EmbeddingTable,
    GcnModel,
    RegSpec,
    full_mask,
    layer_key,
)
from .stream import (
    BipartiteGraph,
    Interaction,
    NodeId,
    Segment,
    build_bipartite_graph,
    build_user_user_graph,
    split_segment,
)
from .temporal import (
    TemporalAttention,
    fit_temporal_attention,
    init_embeddings_plain,
    init_user_embeddings,
    refresh_history,
)
from .training import PhaseResult, TrainConfig, train_phase


class FilterId(NamedTuple):
    layer: int
    index: int


@dataclass(frozen=True)
class PruneReport:
    """BFS partition of pre-prune filters in layers 1..K-1."""

    dead: frozenset
    surviving: frozenset
    epsilon: float
    widths_before: tuple[int, ...]
    widths_after: tuple[int, ...]


@dataclass
class ExpansionReport:
    added: frozenset
    retained: frozenset
    per_layer_added: int
    widths_before: tuple[int, ...]
    widths_after: tuple[int, ...]


@dataclass(frozen=True)
class RegConfig:
    l1: float = 0.001
    l2: float = 0.01
    group: float = 0.01
    epsilon: float = 1e-8

    def __post_init__(self):
        if min(self.l1, self.l2, self.group, self.epsilon) < 0:
            raise ValueError("regularization coefficients must be >= 0")


# ---------------------------------------------------------------------------
# sparsification, connectivity, pruning
# ---------------------------------------------------------------------------


def train_topmost_sparse(
    model: GcnModel,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    train_interactions: Sequence[Interaction],
    val_interactions: Sequence[Interaction],
    reg: RegConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    k: int = 20,
    candidate_items: Sequence[NodeId] | None = None,
    init_scale: float = 0.01,
) -> PhaseResult:
    """Reinitialize the topmost layer and train only it, L1-proximally.

    Everything below the top layer and all embeddings stay bit-identical;
    the induced sparsity is what the connectivity sweep reads afterwards.
    """
    top = model.layers[-1]
    top.user_weights[:] = rng.uniform(-init_scale, init_scale, top.user_weights.shape)
    top.item_weights[:] = rng.uniform(-init_scale, init_scale, top.item_weights.shape)
    mask = full_mask(model, table, layers=[model.num_layers])
    return train_phase(
        model,
        table,
        graph,
        train_interactions,
        val_interactions,
        mask,
        RegSpec(l1_weights=reg.l1),
        cfg,
        phase="topmost_sparse",
        k=k,
        candidate_items=candidate_items,
    )


def find_dead_filters(model: GcnModel, epsilon: float) -> PruneReport:
    """Top-down connectivity sweep over layers K-1 .. 1.

    A filter stays alive iff some alive filter one layer up reads its
    coordinate with |weight| > epsilon on either input half of either
    side's matrix. Topmost filters are never reported dead. The reported
    after-widths account for the keep-one guard applied at prune time.
    """
    k_top = model.num_layers
    dead: set[FilterId] = set()
    surviving: set[FilterId] = set()
    alive_rows = np.arange(model.layers[-1].width)
    for k in range(k_top - 1, 0, -1):
        upper = model.layers[k]  # layer k+1, 0-based list
        width = model.layers[k - 1].width
        half = upper.in_dim
        blocks = [
            upper.user_weights[alive_rows][:, :half],
            upper.user_weights[alive_rows][:, half:],
            upper.item_weights[alive_rows][:, :half],
            upper.item_weights[alive_rows][:, half:],
        ]
        connected = np.zeros(width, dtype=bool)
        for block in blocks:
            connected |= (np.abs(block) > epsilon).any(axis=0)
        for j in range(width):
            (surviving if connected[j] else dead).add(FilterId(k, j))
        alive_rows = np.flatnonzero(connected)
    for j in range(model.layers[-1].width):
        surviving.add(FilterId(k_top, j))
    widths_before = model.widths
    widths_after = []
    for k, width in enumerate(widths_before, start=1):
        n_dead = sum(1 for f in dead if f.layer == k)
        widths_after.append(max(1, width - n_dead))
    return PruneReport(
        frozenset(dead),
        frozenset(surviving),
        epsilon,
        widths_before,
        tuple(widths_after),
    )


def _outgoing_norms(upper: ConvLayer) -> np.ndarray:
    """Per-coordinate norm of all columns through which `upper` reads its input."""
    half = upper.in_dim
    norms = np.zeros(half)
    for w in (upper.user_weights, upper.item_weights):
        norms += np.sum(w[:, :half] ** 2, axis=0)
        norms += np.sum(w[:, half:] ** 2, axis=0)
    return np.sqrt(norms)


def prune_filters(model: GcnModel, report: PruneReport) -> GcnModel:
    """Remove dead filters: their rows at layer k, their columns at layer k+1.

    Surviving weights are carried over bit-exactly. If a whole layer is
    reported dead, the filter with the largest outgoing norm is retained
    so the network never collapses to width zero.
    """
    if report.widths_before != model.widths:
        raise ValueError("prune report does not match this model")
    layers = [layer.copy() for layer in model.layers]
    for k in range(1, model.num_layers):
        dead_idx = sorted(f.index for f in report.dead if f.layer == k)
        if not dead_idx:
            continue
        width = layers[k - 1].width
        if len(dead_idx) == width:
            keep_anyway = int(np.argmax(_outgoing_norms(layers[k])))
            dead_idx = [j for j in dead_idx if j != keep_anyway]
        keep = np.array([j for j in range(width) if j not in set(dead_idx)], dtype=int)
        layers[k - 1] = ConvLayer(
            layers[k - 1].user_weights[keep],
            layers[k - 1].item_weights[keep],
        )
        upper = layers[k]
        cols = np.concatenate([keep, width + keep])
        layers[k] = ConvLayer(upper.user_weights[:, cols], upper.item_weights[:, cols])
    return GcnModel(model.embedding_dim, layers, model.variant)


def refine_ltp(
    model: GcnModel,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    train_interactions: Sequence[Interaction],
    val_interactions: Sequence[Interaction],
    reg: RegConfig,
    cfg: TrainConfig,
    k: int = 20,
    candidate_items: Sequence[NodeId] | None = None,
) -> PhaseResult:
    """Fine-tune all surviving convolution weights under L2; embeddings frozen."""
    mask = full_mask(model, table)
    return train_phase(
        model,
        table,
        graph,
        train_interactions,
        val_interactions,
        mask,
        RegSpec(l2_weights=reg.l2),
        cfg,
        phase="refine_ltp",
        k=k,
        candidate_items=candidate_items,
    )


# ---------------------------------------------------------------------------
# expansion
# ---------------------------------------------------------------------------


def expand_layers(
    model: GcnModel,
    n_new: int,
    rng: np.random.Generator,
    init_scale: float = 0.01,
) -> tuple[GcnModel, ExpansionReport]:
    """Append n_new filters to every layer.

    New filter rows are random; the columns through which old filters
    would read the new coordinates start at exactly zero, so the
    pre-expansion function is preserved on the original coordinates.
    """
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    widths_before = model.widths
    if n_new == 0:
        return model.copy(), ExpansionReport(
            frozenset(), frozenset(), 0, widths_before, widths_before
        )
    layers = []
    added = set()
    in_old = model.embedding_dim
    in_new = 0  # layer 0 (embeddings) never expands
    for k, layer in enumerate(model.layers, start=1):
        width = layer.width
        out_w = width + n_new
        in_total = in_old + in_new

        def rebuild(w: np.ndarray) -> np.ndarray:
            out = np.zeros((out_w, 2 * in_total))
            # column layout: [self_old, self_new, neigh_old, neigh_new]
            out[:width, :in_old] = w[:, :in_old]
            out[:width, in_total : in_total + in_old] = w[:, in_old:]
            out[width:] = rng.uniform(-init_scale, init_scale, (n_new, 2 * in_total))
            return out

        user_w = rebuild(layer.user_weights)
        item_w = rebuild(layer.item_weights)
        layers.append(ConvLayer(user_w, item_w))
        added.update(FilterId(k, j) for j in range(width, out_w))
        in_old, in_new = width, n_new
    expanded = GcnModel(model.embedding_dim, layers, model.variant)
    return expanded, ExpansionReport(
        frozenset(added), frozenset(), n_new, widths_before, expanded.widths
    )


def expansion_mask(model: GcnModel, report: ExpansionReport) -> dict[str, np.ndarray]:
    """Mask selecting exactly the added filters' incoming rows."""
    mask: dict[str, np.ndarray] = {}
    for k, old_width in enumerate(report.widths_before, start=1):
        shape = model.layers[k - 1].user_weights.shape
        rows = np.zeros(shape, dtype=bool)
        rows[old_width:] = True
        mask[layer_key(k, "user")] = rows
        mask[layer_key(k, "item")] = rows.copy()
    return mask


def train_expansion(
    model: GcnModel,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    train_interactions: Sequence[Interaction],
    val_interactions: Sequence[Interaction],
    report: ExpansionReport,
    reg: RegConfig,
    cfg: TrainConfig,
    k: int = 20,
    candidate_items: Sequence[NodeId] | None = None,
) -> PhaseResult:
    """Train only the added filters, under L1 plus joint group shrinkage.

    A group is one added filter's full incoming row on both sides taken
    together; the block soft-threshold can zero it exactly. Old filters,
    including their zero columns into the new coordinates, stay frozen
    until the final joint finetune.
    """
    mask = expansion_mask(model, report)
    groups = tuple((f.layer, f.index) for f in sorted(report.added))
    return train_phase(
        model,
        table,
        graph,
        train_interactions,
        val_interactions,
        mask,
        RegSpec(l1_weights=reg.l1, group_weight=reg.group, groups=groups),
        cfg,
        phase="train_expansion",
        k=k,
        candidate_items=candidate_items,
    )


def prune_expansion(
    model: GcnModel, report: ExpansionReport, epsilon: float
) -> tuple[GcnModel, ExpansionReport]:
    """Drop added filters whose incoming weights all sit within epsilon.

    The matching columns one layer up are removed as well; since a zeroed
    filter outputs exactly zero, the removal never changes any forward
    value. Retained filter ids are recorded in the returned report.
    """
    drop_rows: dict[int, list[int]] = {}
    retained: set[FilterId] = set()
    for fid in sorted(report.added):
        layer = model.layers[fid.layer - 1]
        incoming = np.concatenate(
            [layer.user_weights[fid.index], layer.item_weights[fid.index]]
        )
        if np.all(np.abs(incoming) <= epsilon):
            drop_rows.setdefault(fid.layer, []).append(fid.index)
        else:
            retained.add(fid)
    layers = [layer.copy() for layer in model.layers]
    for k in range(1, model.num_layers + 1):
        rows = drop_rows.get(k)
        if rows:
            layers[k - 1] = ConvLayer(
                np.delete(layers[k - 1].user_weights, rows, axis=0),
                np.delete(layers[k - 1].item_weights, rows, axis=0),
            )
        below = drop_rows.get(k - 1)
        if below:
            half = model.layers[k - 1].in_dim
            cols = [*below, *(half + j for j in below)]
            layers[k - 1] = ConvLayer(
                np.delete(layers[k - 1].user_weights, cols, axis=1),
                np.delete(layers[k - 1].item_weights, cols, axis=1),
            )
    pruned = GcnModel(model.embedding_dim, layers, model.variant)
    new_report = ExpansionReport(
        report.added,
        frozenset(retained),
        report.per_layer_added,
        report.widths_before,
        pruned.widths,
    )
    return pruned, new_report


def final_finetune(
    model: GcnModel,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    train_interactions: Sequence[Interaction],
    val_interactions: Sequence[Interaction],
    reg: RegConfig,
    cfg: TrainConfig,
    k: int = 20,
    candidate_items: Sequence[NodeId] | None = None,
) -> PhaseResult:
    """Joint finetune of all convolution weights (L1-proximal) and embeddings (L2)."""
    mask = full_mask(model, table, embeddings=True)
    return train_phase(
        model,
        table,
        graph,
        train_interactions,
        val_interactions,
        mask,
        RegSpec(l1_weights=reg.l1, l2_embeddings=reg.l2),
        cfg,
        phase="final_finetune",
        k=k,
        candidate_items=candidate_items,
    )


# ---------------------------------------------------------------------------
# one full segment
# ---------------------------------------------------------------------------


@dataclass
class DegcState:
    model: GcnModel
    table: EmbeddingTable
    ta: TemporalAttention
    known_users: set = field(default_factory=set)
    known_items: set = field(default_factory=set)
    t: int = 0


@dataclass(frozen=True)
class DegcConfig:
    reg: RegConfig = RegConfig()
    train: TrainConfig = TrainConfig()
    n_expand: int = 30
    co_threshold: int = 1
    k: int = 20
    lambda_ta: float = 0.01
    init_scale: float = 0.01
    use_hcp: bool = True  # historical convolution pruning (ablation switch)
    use_tpm: bool = True  # temporal preference modeling (ablation switch)


@dataclass
class SegmentOutcome:
    metrics: SegmentMetrics
    prune_report: PruneReport | None
    expansion_report: ExpansionReport
    phase_results: list[PhaseResult]
    widths_trace: dict[str, tuple[int, ...]]
    zero_fraction: float


def _phase_cfg(cfg: DegcConfig, seed: int, t: int, phase_idx: int) -> TrainConfig:
    derived = int(
        np.random.SeedSequence(seed, spawn_key=(t, phase_idx)).generate_state(1)[0]
    )
    base = cfg.train
    return TrainConfig(
        learning_rate=base.learning_rate,
        batch_size=base.batch_size,
        max_epochs=base.max_epochs,
        patience=base.patience,
        seed=derived,
        negatives_per_positive=base.negatives_per_positive,
    )


def run_degc_segment(
    state: DegcState, segment: Segment, cfg: DegcConfig, seed: int
) -> SegmentOutcome:
    """Advance the stream state by one segment through the full pipeline.

    Order: temporal embedding init, topmost sparsification, connectivity
    pruning, survivor refinement, expansion, expansion training,
    expansion pruning, joint finetune, evaluation on the segment's test
    split, then the shift-vector refit. Deterministic for a fixed seed.
    """
    t = state.t + 1
    from .model import conv_zero_fraction

    rng_init = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, 100)))
    rng_top = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, 101)))
    rng_expand = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, 102)))
    split_seed = int(np.random.SeedSequence(seed, spawn_key=(t, 103)).generate_state(1)[0])

    if cfg.use_tpm:
        uu_graph = build_user_user_graph(segment, cfg.co_threshold)
        init_report = init_user_embeddings(
            state.ta, segment, uu_graph, state.table, rng_init, cfg.init_scale
        )
    else:
        init_report = init_embeddings_plain(segment, state.table, rng_init, cfg.init_scale)

    splits = split_segment(segment, seed=split_seed)
    train_graph = build_bipartite_graph(splits.train)
    state.known_users |= segment.users()
    state.known_items |= segment.items()
    candidates = sorted(state.known_items, key=str)

    widths_trace = {"start": state.model.widths}
    phase_results: list[PhaseResult] = []
    prune_report: PruneReport | None = None

    common = dict(
        table=state.table,
        graph=train_graph,
        train_interactions=splits.train,
        val_interactions=splits.validation,
        k=cfg.k,
        candidate_items=candidates,
    )

    if cfg.use_hcp:
        phase_results.append(
            train_topmost_sparse(
                state.model,
                reg=cfg.reg,
                cfg=_phase_cfg(cfg, seed, t, 0),
                rng=rng_top,
                init_scale=cfg.init_scale,
                **common,
            )
        )
        prune_report = find_dead_filters(state.model, cfg.reg.epsilon)
        state.model = prune_filters(state.model, prune_report)
    widths_trace["pruned"] = state.model.widths

    phase_results.append(
        refine_ltp(state.model, reg=cfg.reg, cfg=_phase_cfg(cfg, seed, t, 1), **common)
    )

    state.model, expansion_report = expand_layers(
        state.model, cfg.n_expand, rng_expand, cfg.init_scale
    )
    widths_trace["expanded"] = state.model.widths
    if cfg.n_expand > 0:
        phase_results.append(
            train_expansion(
                state.model,
                report=expansion_report,
                reg=cfg.reg,
                cfg=_phase_cfg(cfg, seed, t, 2),
                **common,
            )
        )
    state.model, expansion_report = prune_expansion(
        state.model, expansion_report, cfg.reg.epsilon
    )
    widths_trace["final"] = state.model.widths

    phase_results.append(
        final_finetune(state.model, reg=cfg.reg, cfg=_phase_cfg(cfg, seed, t, 3), **common)
    )

    seg_metrics = evaluate_segment(
        state.model, state.table, splits, candidates, cfg.k, train_graph, segment.index
    )

    if cfg.use_tpm:
        observed = {
            u: (prev, dt, state.table.user_vector(u))
            for u, (prev, dt) in init_report.observations.items()
        }
        if observed:
            fit_temporal_attention(state.ta, observed, cfg.lambda_ta)
        refresh_history(state.ta, state.table, sorted(segment.users(), key=str))

    state.t = t
    return SegmentOutcome(
        metrics=seg_metrics,
        prune_report=prune_report,
        expansion_report=expansion_report,
        phase_results=phase_results,
        widths_trace=widths_trace,
        zero_fraction=conv_zero_fraction(state.model),
    )
