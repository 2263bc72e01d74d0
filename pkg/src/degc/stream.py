"""Interaction streams: loading, segmentation, splits, per-segment graphs.

A raw stream of (user, item, timestamp) rows is cut into consecutive
equal-span time segments. Each segment yields a deduplicated bipartite
interaction graph, a user-user co-interaction graph, and an 8:1:1
train/validation/test split. A configurable synthetic generator produces
drifting preference streams for desk-scale experiments.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

NodeId = Union[str, int]


@dataclass(frozen=True)
class Interaction:
    user_id: NodeId
    item_id: NodeId
    timestamp: int


def _ikey(x: Interaction) -> tuple:
    return (x.timestamp, str(x.user_id), str(x.item_id))


@dataclass(frozen=True)
class ColumnFormat:
    """Column layout of a delimiter-separated interaction file."""

    delimiter: str = ","
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2
    skip_header: bool = False


class LoadResult(NamedTuple):
    interactions: list[Interaction]
    malformed: int


def load_interactions(path: str | Path, fmt: ColumnFormat = ColumnFormat()) -> LoadResult:
    """Parse an interaction file, keeping file order and counting bad rows.

    A row is malformed when a referenced column is missing, the timestamp
    does not parse as a non-negative integer, or a field is empty.
    Raises ValueError when no row parses at all.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"interaction file not found: {path}")
    needed = max(fmt.user_col, fmt.item_col, fmt.time_col) + 1
    interactions: list[Interaction] = []
    malformed = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if lineno == 0 and fmt.skip_header:
                continue
            line = line.rstrip("\n\r")
            if not line:
                continue
            parts = line.split(fmt.delimiter)
            if len(parts) < needed:
                malformed += 1
                continue
            user = parts[fmt.user_col].strip()
            item = parts[fmt.item_col].strip()
            raw_ts = parts[fmt.time_col].strip()
            try:
                ts = int(raw_ts)
            except ValueError:
                malformed += 1
                continue
            if not user or not item or ts < 0:
                malformed += 1
                continue
            interactions.append(Interaction(user, item, ts))
    if not interactions:
        raise ValueError(f"zero parseable rows in {path}")
    return LoadResult(interactions, malformed)


def filter_interactions(
    interactions: Sequence[Interaction],
    min_user_interactions: int = 0,
    min_item_interactions: int = 0,
) -> list[Interaction]:
    """Drop rows of users/items below the given interaction counts.

    Single pass: counts are taken on the input as-is, so removing a
    sparse item does not retroactively disqualify its users.
    """
    if min_user_interactions <= 1 and min_item_interactions <= 1:
        return list(interactions)
    user_counts = Counter(x.user_id for x in interactions)
    item_counts = Counter(x.item_id for x in interactions)
    return [
        x
        for x in interactions
        if user_counts[x.user_id] >= min_user_interactions
        and item_counts[x.item_id] >= min_item_interactions
    ]


@dataclass(frozen=True)
class Segment:
    """One fixed-span window of the stream (index is 1-based)."""

    index: int
    start: float
    end: float
    interactions: tuple[Interaction, ...]
    new_users: frozenset
    new_items: frozenset

    @property
    def time_window(self) -> tuple[float, float]:
        return (self.start, self.end)

    def users(self) -> set:
        return {x.user_id for x in self.interactions}

    def items(self) -> set:
        return {x.item_id for x in self.interactions}


def segment_stream(interactions: Sequence[Interaction], num_segments: int) -> list[Segment]:
    """Cut a stream into equal-span segments covering [min_ts, max_ts].

    Windows are half-open [start, end) except the last, which is closed
    so the maximal timestamp belongs to segment T. Membership is decided
    with exact integer arithmetic. Duplicate (user, item, timestamp)
    triples are collapsed within a segment.
    """
    if num_segments < 1:
        raise ValueError("num_segments must be >= 1")
    if not interactions:
        raise ValueError("cannot segment an empty stream")
    stamps = [x.timestamp for x in interactions]
    lo, hi = min(stamps), max(stamps)
    span = hi - lo
    if num_segments > span + 1:
        raise ValueError(
            f"{num_segments} segments exceed the timestamp span of {span + 1} ticks"
        )
    buckets: list[list[Interaction]] = [[] for _ in range(num_segments)]
    for x in interactions:
        if span == 0:
            idx = 0
        else:
            idx = min((x.timestamp - lo) * num_segments // span, num_segments - 1)
        buckets[idx].append(x)

    segments: list[Segment] = []
    seen_users: set = set()
    seen_items: set = set()
    for i, bucket in enumerate(buckets):
        uniq = sorted(set(bucket), key=_ikey)
        users = {x.user_id for x in uniq}
        items = {x.item_id for x in uniq}
        segments.append(
            Segment(
                index=i + 1,
                start=lo + i * span / num_segments,
                end=lo + (i + 1) * span / num_segments,
                interactions=tuple(uniq),
                new_users=frozenset(users - seen_users),
                new_items=frozenset(items - seen_items),
            )
        )
        seen_users |= users
        seen_items |= items
    return segments


@dataclass(frozen=True)
class SplitData:
    train: tuple[Interaction, ...]
    validation: tuple[Interaction, ...]
    test: tuple[Interaction, ...]

    def __len__(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)


def split_segment(
    segment: Segment,
    ratios: tuple[float, float, float] = (8, 1, 1),
    seed: int = 0,
) -> SplitData:
    """Per-user stratified train/validation/test split of one segment.

    Users with fewer than 3 interactions go entirely to train. A
    stratified user contributes max(1, round(n * ratio)) interactions to
    validation and to test, so every stratified user keeps at least one
    training interaction and appears in both held-out sets.
    """
    if not segment.interactions:
        raise ValueError("cannot split an empty segment")
    total = float(sum(ratios))
    r_val, r_test = ratios[1] / total, ratios[2] / total
    by_user: dict[NodeId, list[Interaction]] = defaultdict(list)
    for x in segment.interactions:
        by_user[x.user_id].append(x)

    rng = np.random.default_rng(seed)
    train: list[Interaction] = []
    val: list[Interaction] = []
    test: list[Interaction] = []
    for user in sorted(by_user, key=str):
        rows = by_user[user]
        n = len(rows)
        if n < 3:
            train.extend(rows)
            continue
        n_val = max(1, round(n * r_val))
        n_test = max(1, round(n * r_test))
        if n_val + n_test >= n:  # keep at least one training row
            n_val = n_test = 1
        perm = rng.permutation(n)
        test.extend(rows[i] for i in perm[:n_test])
        val.extend(rows[i] for i in perm[n_test : n_test + n_val])
        train.extend(rows[i] for i in perm[n_test + n_val :])
    return SplitData(tuple(train), tuple(val), tuple(test))


@dataclass(frozen=True)
class BipartiteGraph:
    """Deduplicated user-item adjacency with symmetric neighbor lists."""

    user_neighbors: dict[NodeId, tuple[NodeId, ...]]
    item_neighbors: dict[NodeId, tuple[NodeId, ...]]

    def users(self) -> list[NodeId]:
        return list(self.user_neighbors)

    def items(self) -> list[NodeId]:
        return list(self.item_neighbors)

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.user_neighbors.values())


def build_bipartite_graph(source: Segment | Iterable[Interaction]) -> BipartiteGraph:
    """Build the segment's bipartite graph (one edge per distinct pair)."""
    interactions = source.interactions if isinstance(source, Segment) else source
    pairs = {(x.user_id, x.item_id) for x in interactions}
    u2i: dict[NodeId, set] = defaultdict(set)
    i2u: dict[NodeId, set] = defaultdict(set)
    for u, i in pairs:
        u2i[u].add(i)
        i2u[i].add(u)
    user_neighbors = {u: tuple(sorted(u2i[u], key=str)) for u in sorted(u2i, key=str)}
    item_neighbors = {i: tuple(sorted(i2u[i], key=str)) for i in sorted(i2u, key=str)}
    return BipartiteGraph(user_neighbors, item_neighbors)


@dataclass(frozen=True)
class UserUserGraph:
    """Co-interaction graph: edge iff two users share >= co_threshold items."""

    neighbors: dict[NodeId, tuple[NodeId, ...]]
    co_threshold: int


def build_user_user_graph(
    source: Segment | Iterable[Interaction], co_threshold: int = 1
) -> UserUserGraph:
    if co_threshold < 1:
        raise ValueError("co_threshold must be >= 1")
    interactions = source.interactions if isinstance(source, Segment) else source
    items_of: dict[NodeId, set] = defaultdict(set)
    users_of: dict[NodeId, set] = defaultdict(set)
    for x in interactions:
        items_of[x.user_id].add(x.item_id)
        users_of[x.item_id].add(x.user_id)
    shared: Counter = Counter()
    for item, users in users_of.items():
        ranked = sorted(users, key=str)
        for a_pos, a in enumerate(ranked):
            for b in ranked[a_pos + 1 :]:
                shared[(a, b)] += 1
    adj: dict[NodeId, set] = {u: set() for u in items_of}
    for (a, b), count in shared.items():
        if count >= co_threshold:
            adj[a].add(b)
            adj[b].add(a)
    neighbors = {u: tuple(sorted(adj[u], key=str)) for u in sorted(adj, key=str)}
    return UserUserGraph(neighbors, co_threshold)


def _entities(segment: Segment) -> set:
    # Tag by side so a user id can never collide with an item id.
    return {("u", u) for u in segment.users()} | {("i", i) for i in segment.items()}


def compute_aer(segments: Sequence[Segment]) -> float:
    """Average Jaccard overlap of entity (user + item) sets between adjacent segments."""
    if len(segments) < 2:
        raise ValueError("AER needs at least 2 segments")
    scores = []
    for a, b in zip(segments, segments[1:]):
        ea, eb = _entities(a), _entities(b)
        union = len(ea | eb)
        scores.append(1.0 if union == 0 else len(ea & eb) / union)
    return float(np.mean(scores))


@dataclass(frozen=True)
class SyntheticConfig:
    """Drifting-preference stream generator parameters.

    Users carry a latent position on a ring of item clusters; the
    position advances by drift_rate / n_clusters per segment, so
    drift_rate 1 with 2 clusters flips the dominant cluster every
    segment and drift_rate 0 freezes preferences.
    """

    n_users: int
    n_items: int
    num_segments: int
    drift_rate: float
    seed: int
    n_clusters: int = 6
    interactions_per_user: int = 20
    new_user_rate: float = 0.02
    activity_prob: float = 0.85
    segment_span: int = 1000
    concentration: float = 0.08

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.num_segments, self.n_clusters) < 1:
            raise ValueError("counts must be >= 1")
        if not 0.0 <= self.drift_rate <= 1.0:
            raise ValueError("drift_rate must lie in [0, 1]")


def _ring_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.abs(a - b) % 1.0
    return np.minimum(d, 1.0 - d)


def _arrival_segments(cfg: SyntheticConfig) -> np.ndarray:
    per_segment = round(cfg.new_user_rate * cfg.n_users)
    first = cfg.n_users - per_segment * (cfg.num_segments - 1)
    if first < 1:
        raise ValueError("new_user_rate leaves no users for the first segment")
    arrival = np.ones(cfg.n_users, dtype=int)
    for t in range(2, cfg.num_segments + 1):
        start = first + (t - 2) * per_segment
        arrival[start : start + per_segment] = t
    return arrival


def synthetic_user_phases(cfg: SyntheticConfig) -> np.ndarray:
    """Latent ring positions, shape (num_segments, n_users); row t-1 is segment t."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    base = rng.uniform(0.0, 1.0, cfg.n_users)
    steps = np.arange(cfg.num_segments)[:, None]
    return (base[None, :] + steps * cfg.drift_rate / cfg.n_clusters) % 1.0


def synthetic_item_clusters(cfg: SyntheticConfig) -> np.ndarray:
    """Contiguous cluster index per item, shape (n_items,)."""
    return (np.arange(cfg.n_items) * cfg.n_clusters) // cfg.n_items


def generate_synthetic_stream(cfg: SyntheticConfig) -> list[Segment]:
    """Sample the drift stream; byte-identical output for equal (cfg, seed)."""
    phases = synthetic_user_phases(cfg)
    clusters = synthetic_item_clusters(cfg)
    arrival = _arrival_segments(cfg)
    centers = (np.arange(cfg.n_clusters) + 0.5) / cfg.n_clusters
    cluster_sizes = np.bincount(clusters, minlength=cfg.n_clusters)

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    user_ids = [f"u{n:05d}" for n in range(cfg.n_users)]
    item_ids = [f"i{n:05d}" for n in range(cfg.n_items)]

    segments: list[Segment] = []
    seen_users: set = set()
    seen_items: set = set()
    for t in range(1, cfg.num_segments + 1):
        w_start = (t - 1) * cfg.segment_span
        w_end = t * cfg.segment_span
        rows: list[Interaction] = []
        for u in range(cfg.n_users):
            if arrival[u] > t:
                continue
            if arrival[u] < t and rng.random() >= cfg.activity_prob:
                continue
            weight = np.exp(
                -((_ring_distance(phases[t - 1, u], centers) / cfg.concentration) ** 2)
            )
            p_item = (weight / cluster_sizes)[clusters]
            p_item /= p_item.sum()
            picks = rng.choice(cfg.n_items, size=cfg.interactions_per_user, p=p_item)
            stamps = rng.integers(w_start, w_end, size=cfg.interactions_per_user)
            rows.extend(
                Interaction(user_ids[u], item_ids[i], int(s))
                for i, s in zip(picks, stamps)
            )
        # Pin the stream's extremes so re-segmenting a dumped stream with
        # the same T reproduces these windows exactly.
        if rows and t == 1:
            rows[0] = Interaction(rows[0].user_id, rows[0].item_id, 0)
        if rows and t == cfg.num_segments:
            rows[0] = Interaction(rows[0].user_id, rows[0].item_id, w_end)

        uniq = sorted(set(rows), key=_ikey)
        users = {x.user_id for x in uniq}
        items = {x.item_id for x in uniq}
        segments.append(
            Segment(
                index=t,
                start=float(w_start),
                end=float(w_end),
                interactions=tuple(uniq),
                new_users=frozenset(users - seen_users),
                new_items=frozenset(items - seen_items),
            )
        )
        seen_users |= users
        seen_items |= items
    return segments


def dump_segments(segments: Sequence[Segment], directory: str | Path) -> list[Path]:
    """Write one sorted 'user,item,timestamp' file per segment."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for seg in segments:
        path = directory / f"segment_{seg.index:03d}.csv"
        lines = sorted(f"{x.user_id},{x.item_id},{x.timestamp}" for x in seg.interactions)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written
