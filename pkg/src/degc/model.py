"""Dense graph-convolution model with dynamic per-layer widths.

Layer k maps the concatenation [self; aggregated-neighbor] of layer-(k-1)
outputs through a side-specific weight matrix; a filter is the incoming
weight row producing one output coordinate, and user/item filters with the
same index live and die together so both sides always share widths. The
readout concatenates the base embedding with every layer output and scores
user-item pairs by inner product.

Gradients are exact reverse accumulation over the full propagation,
restricted to an arbitrary masked parameter subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

from .stream import BipartiteGraph

NodeId = Union[str, int]

VARIANTS = ("ngcf", "lightgcn_dense")


class EmbeddingTable:
    """Dense embedding store keyed by opaque user/item ids.

    Rows are appended in insertion order and never move, so live matrix
    views stay valid while training mutates them in place.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.dim = dim
        self._user_rows: dict[NodeId, int] = {}
        self._item_rows: dict[NodeId, int] = {}
        self._user_data = np.zeros((4, dim))
        self._item_data = np.zeros((4, dim))

    # -- growth ------------------------------------------------------------
    @staticmethod
    def _append(data: np.ndarray, vec: np.ndarray, n: int) -> np.ndarray:
        if n == data.shape[0]:
            bigger = np.zeros((max(8, 2 * n), data.shape[1]))
            bigger[:n] = data
            data = bigger
        data[n] = vec
        return data

    def add_user(self, user: NodeId, vector: np.ndarray) -> None:
        if user in self._user_rows:
            raise ValueError(f"user already present: {user!r}")
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.dim,):
            raise ValueError(f"expected dim {self.dim}, got {vector.shape}")
        self._user_data = self._append(self._user_data, vector, len(self._user_rows))
        self._user_rows[user] = len(self._user_rows)

    def add_item(self, item: NodeId, vector: np.ndarray) -> None:
        if item in self._item_rows:
            raise ValueError(f"item already present: {item!r}")
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.dim,):
            raise ValueError(f"expected dim {self.dim}, got {vector.shape}")
        self._item_data = self._append(self._item_data, vector, len(self._item_rows))
        self._item_rows[item] = len(self._item_rows)

    # -- access ------------------------------------------------------------
    @property
    def user_matrix(self) -> np.ndarray:
        return self._user_data[: len(self._user_rows)]

    @property
    def item_matrix(self) -> np.ndarray:
        return self._item_data[: len(self._item_rows)]

    @property
    def user_ids(self) -> list[NodeId]:
        return list(self._user_rows)

    @property
    def item_ids(self) -> list[NodeId]:
        return list(self._item_rows)

    @property
    def n_users(self) -> int:
        return len(self._user_rows)

    @property
    def n_items(self) -> int:
        return len(self._item_rows)

    def has_user(self, user: NodeId) -> bool:
        return user in self._user_rows

    def has_item(self, item: NodeId) -> bool:
        return item in self._item_rows

    def user_row(self, user: NodeId) -> int:
        return self._user_rows[user]

    def item_row(self, item: NodeId) -> int:
        return self._item_rows[item]

    def user_vector(self, user: NodeId) -> np.ndarray:
        return self.user_matrix[self._user_rows[user]].copy()

    def item_vector(self, item: NodeId) -> np.ndarray:
        return self.item_matrix[self._item_rows[item]].copy()

    def set_user(self, user: NodeId, vector: np.ndarray) -> None:
        self.user_matrix[self._user_rows[user]] = np.asarray(vector, dtype=float)

    def set_item(self, item: NodeId, vector: np.ndarray) -> None:
        self.item_matrix[self._item_rows[item]] = np.asarray(vector, dtype=float)

    def copy(self) -> "EmbeddingTable":
        dup = EmbeddingTable(self.dim)
        dup._user_rows = dict(self._user_rows)
        dup._item_rows = dict(self._item_rows)
        dup._user_data = self._user_data.copy()
        dup._item_data = self._item_data.copy()
        return dup


@dataclass
class ConvLayer:
    """One graph-convolution layer; weights have shape (width, 2 * in_dim)."""

    user_weights: np.ndarray
    item_weights: np.ndarray

    def __post_init__(self):
        if self.user_weights.shape != self.item_weights.shape:
            raise ValueError("user/item weight matrices must share a shape")
        if self.user_weights.shape[1] % 2 != 0:
            raise ValueError("layer input must concatenate two equal halves")

    @property
    def width(self) -> int:
        return self.user_weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.user_weights.shape[1] // 2

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.user_weights.copy(), self.item_weights.copy())


@dataclass
class GcnModel:
    """A stack of convolution layers over a fixed embedding dimension."""

    embedding_dim: int
    layers: list[ConvLayer]
    variant: str = "ngcf"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        expected = self.embedding_dim
        for k, layer in enumerate(self.layers, start=1):
            if layer.in_dim != expected:
                raise ValueError(
                    f"layer {k} expects input dim {layer.in_dim}, previous width is {expected}"
                )
            expected = layer.width

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(layer.width for layer in self.layers)

    @property
    def rep_dim(self) -> int:
        return self.embedding_dim + sum(self.widths)

    def activate(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.variant == "ngcf" else z

    def copy(self) -> "GcnModel":
        return GcnModel(self.embedding_dim, [l.copy() for l in self.layers], self.variant)


def init_model(
    variant: str,
    embedding_dim: int,
    widths: Sequence[int],
    rng: np.random.Generator,
    scale: float = 0.01,
) -> GcnModel:
    layers = []
    in_dim = embedding_dim
    for width in widths:
        shape = (width, 2 * in_dim)
        layers.append(
            ConvLayer(rng.uniform(-scale, scale, shape), rng.uniform(-scale, scale, shape))
        )
        in_dim = width
    return GcnModel(embedding_dim, layers, variant)


def init_table(
    dim: int,
    users: Iterable[NodeId],
    items: Iterable[NodeId],
    rng: np.random.Generator,
    scale: float = 0.01,
) -> EmbeddingTable:
    table = EmbeddingTable(dim)
    for u in users:
        table.add_user(u, rng.uniform(-scale, scale, dim))
    for i in items:
        table.add_item(i, rng.uniform(-scale, scale, dim))
    return table


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------


@dataclass
class _Gather:
    """Per-destination contiguous gather: sources of row r live in
    src_rows[starts[r] : starts[r] + counts[r]], in id-sorted order."""

    src_rows: np.ndarray
    starts: np.ndarray  # clamped to the sentinel row, reduceat-ready
    counts: np.ndarray
    _scratch: dict = field(default_factory=dict, repr=False)

    def buffer(self, dim: int) -> np.ndarray:
        """Reusable (nnz + 1, dim) workspace whose sentinel row stays zero."""
        buf = self._scratch.get(dim)
        if buf is None:
            buf = np.zeros((len(self.src_rows) + 1, dim))
            self._scratch[dim] = buf
        return buf


def _gather_sum(g: _Gather, values: np.ndarray, elem_weights: np.ndarray | None = None) -> np.ndarray:
    """Sum gathered rows per destination, in the canonical stored order.

    reduceat quirks (an empty run re-emits its boundary row; a start past
    the end is out of bounds) are neutralized by a zero sentinel row and
    a final mask over empty destinations.
    """
    n_dst = len(g.counts)
    out_dim = values.shape[1]
    if g.src_rows.size == 0:
        return np.zeros((n_dst, out_dim))
    buf = g.buffer(out_dim)
    np.take(values, g.src_rows, axis=0, out=buf[:-1])
    if elem_weights is not None:
        buf[:-1] *= elem_weights[:, None]
    out = np.add.reduceat(buf, g.starts, axis=0)
    out[g.counts == 0] = 0.0
    return out


@dataclass
class GraphOps:
    """Mean-aggregation operators sized to the embedding table.

    Aggregation sums neighbors in id-sorted order regardless of table
    insertion order, so forward passes are bit-reproducible; isolated
    nodes aggregate to the zero vector.
    """

    gather_items_per_user: _Gather
    gather_users_per_item: _Gather
    deg_inv_user: np.ndarray
    deg_inv_item: np.ndarray

    def agg_user(self, item_values: np.ndarray) -> np.ndarray:
        """Mean of each user's item-neighbor rows."""
        total = _gather_sum(self.gather_items_per_user, item_values)
        return total * self.deg_inv_user[:, None]

    def agg_item(self, user_values: np.ndarray) -> np.ndarray:
        total = _gather_sum(self.gather_users_per_item, user_values)
        return total * self.deg_inv_item[:, None]

    def agg_user_backward(self, d_agg: np.ndarray) -> np.ndarray:
        """Adjoint of agg_user: scatter user cotangents back onto items."""
        scaled = d_agg * self.deg_inv_user[:, None]
        return _gather_sum(self.gather_users_per_item, scaled)

    def agg_item_backward(self, d_agg: np.ndarray) -> np.ndarray:
        scaled = d_agg * self.deg_inv_item[:, None]
        return _gather_sum(self.gather_items_per_user, scaled)


def _build_gather(
    dst_ids: Sequence[NodeId],
    neighbors_of: Mapping[NodeId, tuple],
    src_row_of,
) -> tuple[_Gather, np.ndarray]:
    src: list[int] = []
    counts = np.zeros(len(dst_ids), dtype=int)
    for r, node in enumerate(dst_ids):
        neighbor_ids = neighbors_of.get(node, ())
        counts[r] = len(neighbor_ids)
        src.extend(src_row_of(n) for n in neighbor_ids)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
    starts = np.minimum(starts, len(src))  # route empty tails to the sentinel
    deg_inv = np.divide(
        1.0, counts, out=np.zeros(len(counts), dtype=float), where=counts > 0
    )
    return _Gather(np.array(src, dtype=int), starts, counts), deg_inv


def build_graph_ops(graph: BipartiteGraph, table: EmbeddingTable) -> GraphOps:
    for user in graph.user_neighbors:
        if not table.has_user(user):
            raise KeyError(f"graph user without embedding: {user!r}")
    for item in graph.item_neighbors:
        if not table.has_item(item):
            raise KeyError(f"graph item without embedding: {item!r}")
    g_user, deg_inv_user = _build_gather(
        table.user_ids, graph.user_neighbors, table.item_row
    )
    g_item, deg_inv_item = _build_gather(
        table.item_ids, graph.item_neighbors, table.user_row
    )
    return GraphOps(g_user, g_item, deg_inv_user, deg_inv_item)


def aggregate_neighbors(vectors: Sequence[np.ndarray], dim: int | None = None) -> np.ndarray:
    """Coordinate-wise mean; the empty neighborhood maps to the zero vector."""
    if not len(vectors):
        if dim is None:
            raise ValueError("dim required for an empty neighborhood")
        return np.zeros(dim)
    stacked = np.asarray(vectors, dtype=float)
    if stacked.ndim != 2:
        raise ValueError("neighbor vectors must share one dimension")
    return stacked.mean(axis=0)


def layer_forward(
    model: GcnModel,
    layer_index: int,
    self_vec: np.ndarray,
    neigh_vec: np.ndarray,
    side: str = "user",
) -> np.ndarray:
    """Single-node convolution: activation(W @ [self; neigh])."""
    layer = model.layers[layer_index - 1]
    weights = layer.user_weights if side == "user" else layer.item_weights
    self_vec = np.asarray(self_vec, dtype=float)
    neigh_vec = np.asarray(neigh_vec, dtype=float)
    if self_vec.shape != (layer.in_dim,) or neigh_vec.shape != (layer.in_dim,):
        raise ValueError(
            f"layer {layer_index} expects two vectors of dim {layer.in_dim}"
        )
    return model.activate(weights @ np.concatenate([self_vec, neigh_vec]))


@dataclass
class ForwardCache:
    """All per-layer outputs and concatenated inputs of one propagation.

    hu[k] / hi[k] are layer-k outputs (index 0 holds the embeddings);
    xu[k-1] / xi[k-1] are the [self; aggregated-neighbor] inputs that
    layer k consumed.
    """

    hu: list[np.ndarray]
    hi: list[np.ndarray]
    xu: list[np.ndarray]
    xi: list[np.ndarray]

    def user_reps(self) -> np.ndarray:
        return np.concatenate(self.hu, axis=1)

    def item_reps(self) -> np.ndarray:
        return np.concatenate(self.hi, axis=1)


def forward_cache(model: GcnModel, table: EmbeddingTable, ops: GraphOps) -> ForwardCache:
    hu = [table.user_matrix]
    hi = [table.item_matrix]
    xu, xi = [], []
    for layer in model.layers:
        in_u = np.concatenate([hu[-1], ops.agg_user(hi[-1])], axis=1)
        in_i = np.concatenate([hi[-1], ops.agg_item(hu[-1])], axis=1)
        xu.append(in_u)
        xi.append(in_i)
        hu.append(model.activate(in_u @ layer.user_weights.T))
        hi.append(model.activate(in_i @ layer.item_weights.T))
    return ForwardCache(hu, hi, xu, xi)


@dataclass
class Representations:
    """Final node representations: embedding followed by each layer output."""

    user_ids: list[NodeId]
    item_ids: list[NodeId]
    user_matrix: np.ndarray
    item_matrix: np.ndarray
    _user_rows: dict = field(repr=False, default_factory=dict)
    _item_rows: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        self._user_rows = {u: r for r, u in enumerate(self.user_ids)}
        self._item_rows = {i: r for r, i in enumerate(self.item_ids)}

    def user(self, user: NodeId) -> np.ndarray:
        return self.user_matrix[self._user_rows[user]]

    def item(self, item: NodeId) -> np.ndarray:
        return self.item_matrix[self._item_rows[item]]


def model_forward(
    model: GcnModel, graph: BipartiteGraph, table: EmbeddingTable
) -> Representations:
    """Propagate synchronously layer by layer over every node in the table.

    Nodes outside the graph receive zero neighbor aggregates at every
    layer, so the forward pass stays total for cold users and items.
    """
    ops = build_graph_ops(graph, table)
    cache = forward_cache(model, table, ops)
    return Representations(
        table.user_ids, table.item_ids, cache.user_reps(), cache.item_reps()
    )


def score_pair(user_rep: np.ndarray, item_rep: np.ndarray) -> float:
    user_rep = np.asarray(user_rep, dtype=float)
    item_rep = np.asarray(item_rep, dtype=float)
    if user_rep.shape != item_rep.shape:
        raise ValueError("representation dims differ")
    return float(user_rep @ item_rep)


def bpr_loss(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Mean -ln sigmoid(pos - neg), evaluated in the stable softplus form."""
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if pos.shape != neg.shape:
        raise ValueError("score lists must have equal length")
    if pos.size == 0:
        raise ValueError("empty score lists")
    return float(np.mean(np.logaddexp(0.0, -(pos - neg))))


# ---------------------------------------------------------------------------
# masked gradients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """Index-space training triples (rows into the embedding table)."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def layer_key(layer: int, side: str) -> str:
    return f"W{layer}{side[0]}"


def param_keys(model: GcnModel) -> list[str]:
    keys = []
    for k in range(1, model.num_layers + 1):
        keys.append(layer_key(k, "user"))
        keys.append(layer_key(k, "item"))
    keys.extend(["Eu", "Ei"])
    return keys


def get_param(model: GcnModel, table: EmbeddingTable, key: str) -> np.ndarray:
    if key == "Eu":
        return table.user_matrix
    if key == "Ei":
        return table.item_matrix
    layer = model.layers[int(key[1:-1]) - 1]
    return layer.user_weights if key.endswith("u") else layer.item_weights


def full_mask(
    model: GcnModel,
    table: EmbeddingTable,
    layers: Iterable[int] | None = None,
    embeddings: bool = False,
) -> dict[str, np.ndarray]:
    """Boolean masks covering whole layers and optionally both embedding sides."""
    chosen = range(1, model.num_layers + 1) if layers is None else layers
    mask: dict[str, np.ndarray] = {}
    for k in chosen:
        shape = model.layers[k - 1].user_weights.shape
        mask[layer_key(k, "user")] = np.ones(shape, dtype=bool)
        mask[layer_key(k, "item")] = np.ones(shape, dtype=bool)
    if embeddings:
        mask["Eu"] = np.ones(table.user_matrix.shape, dtype=bool)
        mask["Ei"] = np.ones(table.item_matrix.shape, dtype=bool)
    return mask


@dataclass(frozen=True)
class RegSpec:
    """Regularization of one training phase.

    l2 terms are differentiable and enter the gradient; l1 and group
    terms are handled proximally by the trainer and never appear here.
    l2_weights is a plain squared norm over the masked convolution
    weights. l2_embeddings follows the usual pairwise-ranking recipe:
    the squared norms of the embeddings each batch triple touches,
    averaged over the batch, so the penalty stays commensurate with the
    batch-mean ranking loss at any catalog size. Groups name added
    filters as (layer, row) pairs whose user+item incoming rows are
    shrunk jointly.
    """

    l1_weights: float = 0.0
    l2_weights: float = 0.0
    l2_embeddings: float = 0.0
    group_weight: float = 0.0
    groups: tuple[tuple[int, int], ...] = ()


def _masked_sq_sum(value: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sum(np.where(mask, value, 0.0) ** 2))


def phase_loss(
    model: GcnModel,
    table: EmbeddingTable,
    ops: GraphOps,
    batch: Batch,
    mask: Mapping[str, np.ndarray] | None = None,
    reg: RegSpec = RegSpec(),
) -> float:
    """BPR loss plus the differentiable l2 terms over the masked subset."""
    cache = forward_cache(model, table, ops)
    ru, ri = cache.user_reps(), cache.item_reps()
    pos = np.einsum("ij,ij->i", ru[batch.users], ri[batch.pos_items])
    neg = np.einsum("ij,ij->i", ru[batch.users], ri[batch.neg_items])
    loss = float(np.mean(np.logaddexp(0.0, -(pos - neg))))
    if mask:
        for key, m in mask.items():
            value = get_param(model, table, key)
            if key.startswith("W") and reg.l2_weights:
                loss += reg.l2_weights * _masked_sq_sum(value, m)
            if key.startswith("E") and reg.l2_embeddings:
                loss += reg.l2_embeddings * _masked_sq_sum(value, m)
    return loss


def gradient(
    model: GcnModel,
    table: EmbeddingTable,
    ops: GraphOps,
    batch: Batch,
    mask: Mapping[str, np.ndarray],
    reg: RegSpec = RegSpec(),
) -> tuple[float, dict[str, np.ndarray]]:
    """Exact gradient of (BPR + l2 terms) w.r.t. the masked parameters.

    Returns the loss and one gradient array per masked key; entries
    outside a mask are exactly zero and unmasked keys are absent.
    """
    for key in mask:
        if key not in param_keys(model):
            raise KeyError(f"mask references unknown parameter {key!r}")
    if len(batch) == 0:
        return 0.0, {k: np.zeros_like(get_param(model, table, k)) for k in mask}

    cache = forward_cache(model, table, ops)
    ru, ri = cache.user_reps(), cache.item_reps()
    pos = np.einsum("ij,ij->i", ru[batch.users], ri[batch.pos_items])
    neg = np.einsum("ij,ij->i", ru[batch.users], ri[batch.neg_items])
    diff = pos - neg
    loss = float(np.mean(np.logaddexp(0.0, -diff)))
    coef = -expit(-diff) / len(batch)

    d_ru = np.zeros_like(ru)
    d_ri = np.zeros_like(ri)
    np.add.at(d_ru, batch.users, coef[:, None] * (ri[batch.pos_items] - ri[batch.neg_items]))
    np.add.at(d_ri, batch.pos_items, coef[:, None] * ru[batch.users])
    np.add.at(d_ri, batch.neg_items, -coef[:, None] * ru[batch.users])

    # Split readout gradients into per-layer blocks.
    blocks = [model.embedding_dim, *model.widths]
    offsets = np.cumsum([0, *blocks])
    gu = [d_ru[:, offsets[k] : offsets[k + 1]].copy() for k in range(len(blocks))]
    gi = [d_ri[:, offsets[k] : offsets[k + 1]].copy() for k in range(len(blocks))]

    grads: dict[str, np.ndarray] = {}
    for k in range(model.num_layers, 0, -1):
        layer = model.layers[k - 1]
        d = layer.in_dim
        if model.variant == "ngcf":
            dzu = gu[k] * (1.0 - cache.hu[k] ** 2)
            dzi = gi[k] * (1.0 - cache.hi[k] ** 2)
        else:
            dzu, dzi = gu[k], gi[k]
        ku, ki = layer_key(k, "user"), layer_key(k, "item")
        if ku in mask:
            grads[ku] = dzu.T @ cache.xu[k - 1]
        if ki in mask:
            grads[ki] = dzi.T @ cache.xi[k - 1]
        dxu = dzu @ layer.user_weights
        dxi = dzi @ layer.item_weights
        gu[k - 1] += dxu[:, :d]
        gi[k - 1] += dxi[:, :d]
        gi[k - 1] += ops.agg_user_backward(dxu[:, d:])
        gu[k - 1] += ops.agg_item_backward(dxi[:, d:])
    if "Eu" in mask:
        grads["Eu"] = gu[0]
    if "Ei" in mask:
        grads["Ei"] = gi[0]

    for key, m in mask.items():
        value = get_param(model, table, key)
        if key.startswith("W") and reg.l2_weights:
            grads[key] = grads[key] + 2.0 * reg.l2_weights * value
            loss += reg.l2_weights * _masked_sq_sum(value, m)
        if key.startswith("E") and reg.l2_embeddings:
            grads[key] = grads[key] + 2.0 * reg.l2_embeddings * value
            loss += reg.l2_embeddings * _masked_sq_sum(value, m)
        grads[key] = np.where(m, grads[key], 0.0)
    return loss, grads


def conv_zero_fraction(model: GcnModel) -> float:
    """Fraction of convolution weight entries that are exactly zero."""
    total = 0
    zeros = 0
    for layer in model.layers:
        for w in (layer.user_weights, layer.item_weights):
            total += w.size
            zeros += int(np.count_nonzero(w == 0.0))
    return zeros / total if total else 0.0
