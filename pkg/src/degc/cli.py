"""Command-line entry points: run, synth, eval, plot-data.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime failure.
Config precedence for `run`: profile defaults < config file < CLI flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .experiment import (
    ConfigError,
    DataError,
    ExperimentConfig,
    apply_overrides,
    desk_profile,
    emit_plot_data,
    paper_profile,
    parse_config_file,
    run_experiment,
)
from .metrics import evaluate_segment
from .stream import (
    ColumnFormat,
    build_bipartite_graph,
    dump_segments,
    generate_synthetic_stream,
    load_interactions,
    segment_stream,
    split_segment,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse failures onto exit code 1
        raise ConfigError(message)


_CONFIG_FIELDS = [f.name for f in dataclasses.fields(ExperimentConfig)]


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    for name in _CONFIG_FIELDS:
        if name in ("method", "out_dir", "seeds"):
            continue
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)


def _build_parser() -> _Parser:
    parser = _Parser(prog="degc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--profile", choices=("desk", "paper"), default="desk")
    run.add_argument("--method", default=None)
    run.add_argument("--seed", type=int, action="append", default=None,
                     help="repeatable; replaces the seeds list")
    run.add_argument("--out", default=None, help="output directory")
    _add_override_flags(run)

    synth = sub.add_parser("synth", help="write a synthetic stream to disk")
    synth.add_argument("--out", required=True, help="interaction file to write")
    synth.add_argument("--segments-dir", default=None,
                       help="also dump one file per segment here")
    synth.add_argument("--profile", choices=("desk", "paper"), default="desk")
    synth.add_argument("--seed", type=int, default=1)
    _add_override_flags(synth)

    ev = sub.add_parser("eval", help="re-score a checkpoint against a segment")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="interaction file")
    ev.add_argument("--segment", type=int, required=True, help="1-based segment index")
    ev.add_argument("--num-segments", type=int, required=True)
    ev.add_argument("--seed", type=int, default=1, help="split seed")
    ev.add_argument("--k", type=int, default=20)
    ev.add_argument("--delimiter", default=",")
    ev.add_argument("--user-col", type=int, default=0)
    ev.add_argument("--item-col", type=int, default=1)
    ev.add_argument("--time-col", type=int, default=2)

    plot = sub.add_parser("plot-data", help="emit plot series from run directories")
    plot.add_argument("--runs", nargs="+", required=True)
    plot.add_argument("--out", required=True)
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = desk_profile() if args.profile == "desk" else paper_profile()
    if getattr(args, "config", None):
        config = parse_config_file(args.config, base=config)
    overrides = {
        name: str(getattr(args, name))
        for name in _CONFIG_FIELDS
        if getattr(args, name, None) is not None
    }
    config = apply_overrides(config, overrides)
    if getattr(args, "method", None):
        config = dataclasses.replace(config, method=args.method)
    if getattr(args, "seed", None):
        seeds = args.seed if isinstance(args.seed, list) else [args.seed]
        config = dataclasses.replace(config, seeds=tuple(seeds))
    if getattr(args, "out", None) and args.command == "run":
        config = dataclasses.replace(config, out_dir=args.out)
    return config


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    result = run_experiment(config)
    print(f"run complete: {result.run_dir}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    seed = args.seed if not isinstance(args.seed, list) else args.seed[0]
    segments = generate_synthetic_stream(config.synthetic_config(seed))
    rows = sorted(
        (x.timestamp, str(x.user_id), str(x.item_id))
        for seg in segments
        for x in seg.interactions
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        "\n".join(f"{u},{i},{ts}" for ts, u, i in rows) + "\n", encoding="utf-8"
    )
    if args.segments_dir:
        dump_segments(segments, args.segments_dir)
    print(f"wrote {sum(len(s.interactions) for s in segments)} interactions to {out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model, table, _ = load_checkpoint(args.checkpoint)
    fmt = ColumnFormat(
        delimiter=args.delimiter,
        user_col=args.user_col,
        item_col=args.item_col,
        time_col=args.time_col,
    )
    try:
        rows = load_interactions(args.data, fmt).interactions
        segments = segment_stream(rows, args.num_segments)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not 1 <= args.segment <= len(segments):
        raise DataError(f"segment {args.segment} outside 1..{len(segments)}")
    target = segments[args.segment - 1]
    from .experiment import split_seed_for

    splits = split_segment(target, seed=split_seed_for(args.seed, target.index))
    known_items = sorted(
        {i for seg in segments[: args.segment] for i in seg.items()}, key=str
    )
    graph = build_bipartite_graph(splits.train)
    metrics = evaluate_segment(
        model, table, splits, known_items, args.k, graph, target.index
    )
    print(
        json.dumps(
            {
                "segment": metrics.segment_index,
                f"recall@{args.k}": metrics.recall,
                f"ndcg@{args.k}": metrics.ndcg,
                "n_users": metrics.n_evaluated_users,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_plot_data(args: argparse.Namespace) -> int:
    written = emit_plot_data(args.runs, args.out)
    print(f"wrote {len(written)} series files to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "plot-data":
            return _cmd_plot_data(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
