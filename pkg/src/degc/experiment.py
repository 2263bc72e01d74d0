"""Config-driven experiment runner: methods, orchestration, persistence.

A run executes one continual-training method over a segmented stream for
each seed, evaluates every segment's test split, and persists per-seed
metrics, seed-averaged metrics, training traces, surgery logs, a final
checkpoint, a provenance manifest, and plot-ready series files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .metrics import SegmentMetrics, aggregate_stream, evaluate_segment
from .model import EmbeddingTable, GcnModel, RegSpec, full_mask, init_model, init_table
from .stream import (
    ColumnFormat,
    Interaction,
    Segment,
    SyntheticConfig,
    build_bipartite_graph,
    filter_interactions,
    generate_synthetic_stream,
    load_interactions,
    segment_stream,
    split_segment,
)
from .surgery import DegcConfig, DegcState, RegConfig, SegmentOutcome, run_degc_segment
from .temporal import TemporalAttention, init_embeddings_plain
from .training import PhaseResult, TrainConfig, train_phase


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


DEGC_METHODS = {
    "degc_finetune": (True, True),
    "degc_finetune_no_hcp": (False, True),
    "degc_finetune_no_tpm": (True, False),
}
BASELINE_METHODS = ("finetune", "uniform", "inverse", "static")
METHODS = tuple(DEGC_METHODS) + BASELINE_METHODS


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment configuration; every field doubles as a config-file key."""

    method: str = "degc_finetune"
    variant: str = "ngcf"
    # data source: a file path, or the synthetic generator when empty
    data_path: str = ""
    delimiter: str = ","
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2
    skip_header: bool = False
    num_segments: int = 10
    filter_min_user: int = 0
    filter_min_item: int = 0
    filter_scope: str = "global"
    # synthetic stream
    n_users: int = 500
    n_items: int = 300
    drift_rate: float = 0.3
    n_clusters: int = 6
    interactions_per_user: int = 20
    new_user_rate: float = 0.02
    activity_prob: float = 0.85
    segment_span: int = 1000
    concentration: float = 0.08
    # model
    embedding_dim: int = 128
    widths: tuple[int, ...] = (128, 128)
    n_expand: int = 30
    # regularization
    lambda1: float = 0.001
    lambda2: float = 0.01
    lambda_group: float = 0.01
    lambda_ta: float = 0.01
    epsilon: float = 1e-8
    co_threshold: int = 1
    # training / evaluation
    k: int = 20
    learning_rate: float = 0.001
    batch_size: int = 1000
    max_epochs: int = 100
    patience: int = 5
    negatives_per_positive: int = 1
    replay_fraction: float = 1.0
    init_scale: float = 0.01
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    out_dir: str = "runs/exp"

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.variant not in ("ngcf", "lightgcn_dense"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.filter_scope not in ("global", "segment"):
            raise ConfigError("filter_scope must be 'global' or 'segment'")
        if self.num_segments < 1:
            raise ConfigError("num_segments must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if any(w < 1 for w in self.widths):
            raise ConfigError("layer widths must be >= 1")
        try:
            self.train_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seed,
            negatives_per_positive=self.negatives_per_positive,
        )

    def reg_config(self) -> RegConfig:
        return RegConfig(
            l1=self.lambda1,
            l2=self.lambda2,
            group=self.lambda_group,
            epsilon=self.epsilon,
        )

    def synthetic_config(self, seed: int) -> SyntheticConfig:
        return SyntheticConfig(
            n_users=self.n_users,
            n_items=self.n_items,
            num_segments=self.num_segments,
            drift_rate=self.drift_rate,
            seed=seed,
            n_clusters=self.n_clusters,
            interactions_per_user=self.interactions_per_user,
            new_user_rate=self.new_user_rate,
            activity_prob=self.activity_prob,
            segment_span=self.segment_span,
            concentration=self.concentration,
        )


def desk_profile(**overrides) -> ExperimentConfig:
    """Desk-scale profile: small widths and batches, capped epochs."""
    base = dict(
        embedding_dim=16,
        widths=(16, 16),
        n_expand=4,
        batch_size=128,
        max_epochs=30,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def paper_profile(**overrides) -> ExperimentConfig:
    return ExperimentConfig(**overrides)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind.startswith("tuple[int"):
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def parse_config_file(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Flat key = value file; '#' starts a comment; keys mirror config fields."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _coerce(key, raw)
    return replace(base or ExperimentConfig(), **values)


def apply_overrides(config: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    coerced = {k: _coerce(k, v) for k, v in overrides.items()}
    return replace(config, **coerced)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_segments(config: ExperimentConfig, seed: int) -> list[Segment]:
    if not config.data_path:
        return generate_synthetic_stream(config.synthetic_config(seed))
    fmt = ColumnFormat(
        delimiter=config.delimiter,
        user_col=config.user_col,
        item_col=config.item_col,
        time_col=config.time_col,
        skip_header=config.skip_header,
    )
    try:
        result = load_interactions(config.data_path, fmt)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    rows = result.interactions
    if config.filter_scope == "global":
        rows = filter_interactions(rows, config.filter_min_user, config.filter_min_item)
        if not rows:
            raise DataError("filtering removed every interaction")
    try:
        segments = segment_stream(rows, config.num_segments)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if config.filter_scope == "segment":
        filtered = []
        seen_users: set = set()
        seen_items: set = set()
        for seg in segments:
            kept = filter_interactions(
                seg.interactions, config.filter_min_user, config.filter_min_item
            )
            users = {x.user_id for x in kept}
            items = {x.item_id for x in kept}
            filtered.append(
                Segment(
                    seg.index,
                    seg.start,
                    seg.end,
                    tuple(kept),
                    frozenset(users - seen_users),
                    frozenset(items - seen_items),
                )
            )
            seen_users |= users
            seen_items |= items
        segments = filtered
    return segments


def split_seed_for(seed: int, t: int) -> int:
    """The per-segment split seed shared by every method of a run."""
    return int(np.random.SeedSequence(seed, spawn_key=(t, 103)).generate_state(1)[0])


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


# ---------------------------------------------------------------------------
# method steps
# ---------------------------------------------------------------------------


@dataclass
class SegmentRecord:
    metrics: SegmentMetrics
    phases: list[PhaseResult] = field(default_factory=list)
    widths_trace: dict[str, tuple[int, ...]] | None = None
    outcome: SegmentOutcome | None = None


@dataclass
class SeedResult:
    seed: int
    method: str
    records: list[SegmentRecord]
    model: GcnModel
    table: EmbeddingTable
    ta: TemporalAttention | None

    @property
    def metrics(self) -> list[SegmentMetrics]:
        return [r.metrics for r in self.records]


def train_from_scratch(
    variant: str,
    embedding_dim: int,
    widths: Sequence[int],
    splits,
    train_cfg: TrainConfig,
    seed: int,
    k: int = 20,
    lambda2: float = 0.01,
    init_scale: float = 0.01,
    extra_train: Sequence[Interaction] = (),
    candidate_items: Sequence = None,
    phase: str = "from_scratch",
    extra_users: Sequence = (),
    extra_items: Sequence = (),
) -> tuple[GcnModel, EmbeddingTable, PhaseResult]:
    """Fresh random model and embeddings trained jointly on the given data.

    extra_users/extra_items widen the embedding table beyond the training
    data (e.g. the full catalog seen so far) so evaluation stays total.
    """
    train_rows = list(extra_train) + list(splits.train)
    parts = (train_rows, splits.validation, splits.test)
    users = sorted({x.user_id for part in parts for x in part} | set(extra_users), key=str)
    items = sorted({x.item_id for part in parts for x in part} | set(extra_items), key=str)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    model = init_model(variant, embedding_dim, widths, rng, init_scale)
    table = init_table(embedding_dim, users, items, rng, init_scale)
    graph = build_bipartite_graph(train_rows)
    mask = full_mask(model, table, embeddings=True)
    result = train_phase(
        model,
        table,
        graph,
        train_rows,
        splits.validation,
        mask,
        RegSpec(l2_embeddings=lambda2),
        replace(train_cfg, seed=_derived_seed(seed, 12)),
        phase=phase,
        k=k,
        candidate_items=candidate_items if candidate_items is not None else items,
    )
    return model, table, result


@dataclass
class BaselineState:
    model: GcnModel | None
    table: EmbeddingTable | None
    known_users: set = field(default_factory=set)
    known_items: set = field(default_factory=set)
    history_train: list[Interaction] = field(default_factory=list)
    t: int = 0


def _sample_replay(
    method: str,
    history: Sequence[Interaction],
    budget: int,
    rng: np.random.Generator,
) -> list[Interaction]:
    """Uniform or inverse-user-degree sampling without replacement."""
    if budget <= 0 or not history:
        return []
    budget = min(budget, len(history))
    if method == "uniform":
        picks = rng.choice(len(history), size=budget, replace=False)
    else:
        degree = Counter()
        for x in history:
            degree[x.user_id] += 1
        weights = np.array([1.0 / degree[x.user_id] for x in history])
        weights /= weights.sum()
        picks = rng.choice(len(history), size=budget, replace=False, p=weights)
    return [history[int(i)] for i in sorted(picks)]


def run_baseline_step(
    method: str,
    state: BaselineState,
    segment: Segment,
    config: ExperimentConfig,
    seed: int,
) -> SegmentRecord:
    """One segment of a non-surgery method: finetune, uniform, inverse, static."""
    t = state.t + 1
    split_seed = split_seed_for(seed, t)
    splits = split_segment(segment, seed=split_seed)
    state.known_users |= segment.users()
    state.known_items |= segment.items()
    candidates = sorted(state.known_items, key=str)
    train_cfg = config.train_config(_derived_seed(seed, t, 1))
    rng_init = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, 100)))
    phases: list[PhaseResult] = []

    if method == "finetune" and state.model is not None:
        init_embeddings_plain(segment, state.table, rng_init, config.init_scale)
        graph = build_bipartite_graph(splits.train)
        mask = full_mask(state.model, state.table, embeddings=True)
        phases.append(
            train_phase(
                state.model,
                state.table,
                graph,
                splits.train,
                splits.validation,
                mask,
                RegSpec(l2_embeddings=config.lambda2),
                train_cfg,
                phase="finetune",
                k=config.k,
                candidate_items=candidates,
            )
        )
    elif method == "static" and state.model is not None:
        init_embeddings_plain(segment, state.table, rng_init, config.init_scale)
        graph = build_bipartite_graph(splits.train)
    elif method in ("uniform", "inverse") and state.model is not None:
        rng_replay = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, 5)))
        budget = round(config.replay_fraction * len(splits.train))
        replay = _sample_replay(method, state.history_train, budget, rng_replay)
        state.model, state.table, result = train_from_scratch(
            config.variant,
            config.embedding_dim,
            config.widths,
            splits,
            train_cfg,
            seed=_derived_seed(seed, t, 2),
            k=config.k,
            lambda2=config.lambda2,
            init_scale=config.init_scale,
            extra_train=replay,
            candidate_items=candidates,
            phase=method,
            extra_users=sorted(state.known_users, key=str),
            extra_items=sorted(state.known_items, key=str),
        )
        phases.append(result)
        graph = build_bipartite_graph(list(replay) + list(splits.train))
    else:
        # First segment of any baseline: train everything from scratch.
        state.model, state.table, result = train_from_scratch(
            config.variant,
            config.embedding_dim,
            config.widths,
            splits,
            train_cfg,
            seed=_derived_seed(seed, t, 2),
            k=config.k,
            lambda2=config.lambda2,
            init_scale=config.init_scale,
            candidate_items=candidates,
            phase=("static_train" if method == "static" else method),
        )
        phases.append(result)
        graph = build_bipartite_graph(splits.train)

    metrics = evaluate_segment(
        state.model, state.table, splits, candidates, config.k, graph, segment.index
    )
    state.history_train.extend(splits.train)
    state.t = t
    return SegmentRecord(metrics=metrics, phases=phases)


def run_stream(config: ExperimentConfig, seed: int) -> SeedResult:
    """Execute the configured method over the whole stream for one seed."""
    segments = load_segments(config, seed)
    records: list[SegmentRecord] = []

    if config.method in DEGC_METHODS:
        use_hcp, use_tpm = DEGC_METHODS[config.method]
        rng_model = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, 0)))
        model = init_model(
            config.variant, config.embedding_dim, config.widths, rng_model, config.init_scale
        )
        state = DegcState(
            model=model,
            table=EmbeddingTable(config.embedding_dim),
            ta=TemporalAttention.zeros(config.embedding_dim),
        )
        degc_cfg = DegcConfig(
            reg=config.reg_config(),
            train=config.train_config(0),
            n_expand=config.n_expand,
            co_threshold=config.co_threshold,
            k=config.k,
            lambda_ta=config.lambda_ta,
            init_scale=config.init_scale,
            use_hcp=use_hcp,
            use_tpm=use_tpm,
        )
        for segment in segments:
            outcome = run_degc_segment(state, segment, degc_cfg, seed)
            records.append(
                SegmentRecord(
                    metrics=outcome.metrics,
                    phases=outcome.phase_results,
                    widths_trace=outcome.widths_trace,
                    outcome=outcome,
                )
            )
        return SeedResult(seed, config.method, records, state.model, state.table, state.ta)

    state = BaselineState(model=None, table=None)
    for segment in segments:
        records.append(run_baseline_step(config.method, state, segment, config, seed))
    return SeedResult(seed, config.method, records, state.model, state.table, None)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _metrics_csv(rows: list[tuple], k: int) -> str:
    lines = [f"segment,recall@{k},ndcg@{k},n_users"]
    for segment, recall, ndcg, n_users in rows:
        lines.append(f"{segment},{recall!r},{ndcg!r},{n_users!r}")
    return "\n".join(lines) + "\n"


def _metrics_rows(metrics: Sequence[SegmentMetrics]) -> list[tuple]:
    return [(m.segment_index, float(m.recall), float(m.ndcg), m.n_evaluated_users) for m in metrics]


def _surgery_log(result: SeedResult) -> str:
    lines = []
    for record in result.records:
        m = record.metrics
        lines.append(f"segment={m.segment_index}")
        if record.widths_trace:
            for stage, widths in record.widths_trace.items():
                lines.append(f"  widths_{stage}={','.join(map(str, widths))}")
        if record.outcome is not None:
            out = record.outcome
            if out.prune_report is not None:
                dead = sorted(out.prune_report.dead)
                lines.append(f"  dead_filters={[(f.layer, f.index) for f in dead]}")
            retained = sorted(out.expansion_report.retained)
            lines.append(f"  retained_expansion={[(f.layer, f.index) for f in retained]}")
            lines.append(f"  zero_fraction={out.zero_fraction!r}")
        for phase in record.phases:
            lines.append(
                f"  phase={phase.phase} epochs={phase.epochs_run} "
                f"best_epoch={phase.best_epoch} final_loss={phase.final_train_loss!r} "
                f"best_val={phase.best_val_metric!r}"
            )
    return "\n".join(lines) + "\n"


def _trace_jsonl(result: SeedResult) -> str:
    lines = []
    for record in result.records:
        for phase in record.phases:
            for entry in phase.trace:
                payload = {"segment": record.metrics.segment_index, **entry}
                lines.append(json.dumps(payload, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def _provenance(config: ExperimentConfig) -> str:
    canonical = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()


@dataclass
class RunResult:
    run_dir: Path
    config: ExperimentConfig
    seed_results: list[SeedResult]


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Run every seed, persist the result bundle, and return it in memory."""
    config.validate()
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    seed_results = [run_stream(config, seed) for seed in config.seeds]

    from . import __version__

    manifest = {
        "config": dataclasses.asdict(config),
        "provenance": _provenance(config),
        "package_version": __version__,
        "method": config.method,
    }
    _atomic_write(run_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    per_seed_rows = []
    for result in seed_results:
        seed_dir = run_dir / f"seed_{result.seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        rows = _metrics_rows(result.metrics)
        per_seed_rows.append(rows)
        _atomic_write(seed_dir / "metrics.csv", _metrics_csv(rows, config.k))
        jsonl = "\n".join(
            json.dumps(
                {
                    "segment": m.segment_index,
                    "recall": float(m.recall),
                    "ndcg": float(m.ndcg),
                    "n_users": m.n_evaluated_users,
                    "k": m.k,
                },
                sort_keys=True,
            )
            for m in result.metrics
        )
        _atomic_write(seed_dir / "metrics.jsonl", jsonl + "\n")
        _atomic_write(seed_dir / "trace.jsonl", _trace_jsonl(result))
        _atomic_write(seed_dir / "surgery.log", _surgery_log(result))
        save_checkpoint(seed_dir / "checkpoint.degc", result.model, result.table, result.ta)

    averaged = []
    n_segments = len(per_seed_rows[0])
    for i in range(n_segments):
        segment = per_seed_rows[0][i][0]
        recall = float(np.mean([rows[i][1] for rows in per_seed_rows]))
        ndcg = float(np.mean([rows[i][2] for rows in per_seed_rows]))
        n_users = float(np.mean([rows[i][3] for rows in per_seed_rows]))
        averaged.append((segment, recall, ndcg, n_users))
    _atomic_write(run_dir / "metrics.csv", _metrics_csv(averaged, config.k))

    summary = {
        "per_seed": {
            str(result.seed): {
                "mean_recall": aggregate_stream(result.metrics).mean_recall,
                "mean_ndcg": aggregate_stream(result.metrics).mean_ndcg,
            }
            for result in seed_results
        },
    }
    summary["overall"] = {
        "mean_recall": float(np.mean([v["mean_recall"] for v in summary["per_seed"].values()])),
        "mean_ndcg": float(np.mean([v["mean_ndcg"] for v in summary["per_seed"].values()])),
    }
    _atomic_write(run_dir / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")

    emit_plot_data([run_dir], run_dir / "series")
    return RunResult(run_dir, config, seed_results)


def _read_metrics_csv(path: Path) -> tuple[list[str], list[list[float]]]:
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
    return header, rows


def emit_plot_data(run_dirs: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """One 'segment,mean,min,max' series file per (method, metric) pair."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        method = manifest["method"]
        seed_files = sorted(run_dir.glob("seed_*/metrics.csv"))
        if not seed_files:
            raise DataError(f"no per-seed metrics under {run_dir}")
        header, first = _read_metrics_csv(seed_files[0])
        metric_names = header[1:3]  # recall@k, ndcg@k
        stacked = {name: [] for name in metric_names}
        segments = [int(row[0]) for row in first]
        for path in seed_files:
            _, rows = _read_metrics_csv(path)
            for col, name in enumerate(metric_names, start=1):
                stacked[name].append([row[col] for row in rows])
        for name in metric_names:
            data = np.array(stacked[name])
            lines = ["segment,mean,min,max"]
            for i, segment in enumerate(segments):
                mean = float(np.mean(data[:, i]))
                lo = float(np.min(data[:, i]))
                hi = float(np.max(data[:, i]))
                lines.append(f"{segment},{mean!r},{lo!r},{hi!r}")
            safe = name.replace("@", "_at_")
            path = out_dir / f"{safe}__{method}.csv"
            _atomic_write(path, "\n".join(lines) + "\n")
            written.append(path)
    return written
