"""Command-line entry point: ``contnav <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench
from .maze_sim import builtin_mazes, get_maze

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _maze(name: str):
    try:
        return get_maze(name)
    except KeyError:
        valid = ", ".join(m.name for m in builtin_mazes())
        raise UsageError(f"unknown maze {name!r}; valid mazes: {valid}")


def cmd_list_mazes(args) -> int:
    for m in builtin_mazes():
        print(f"{m.name}\t{m.family}\t{m.extent[0]:g}x{m.extent[1]:g}")
    return EXIT_OK


def cmd_list_streams(args) -> int:
    for name, s in bench.builtin_streams().items():
        print(f"{name}\t{' -> '.join(s.tasks)}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .datasets import generate_dataset, save_dataset

    maze = _maze(args.maze)
    if args.episodes is not None and args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    if not 0.0 <= args.noise <= 1.0:
        raise UsageError("--noise must lie in [0, 1]")
    ds = generate_dataset(maze, args.episodes, args.noise, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.episodes)} episodes ({ds.n_transitions} transitions, "
          f"success {ds.success_rate:.3f}) to {args.out}")
    return EXIT_OK


def cmd_train_stream(args) -> int:
    try:
        cfg = bench.RunConfig.load(args.config)
        cfg.stream_spec()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}")
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"invalid config: {e.args[0] if e.args else e}")
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = bench.run(cfg, log=lambda msg: print(msg, flush=True))
    failed = [(s, m) for s, methods in report["streams"].items() for m, e in methods.items() if e["failed_seeds"]]
    print(f"report written to {cfg.output_dir}")
    if failed:
        print("failed cells: " + ", ".join(f"{s}/{m}" for s, m in failed), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _checkpoint_policy(path: Path, task):
    if (path / "state.json").exists():
        from .continual import load_strategy, policy_for_task

        state = load_strategy(path)
        j = state.tasks_seen - 1 if task is None else task
        if not 0 <= j < state.tasks_seen:
            raise UsageError(f"--task must be in [0, {state.tasks_seen - 1}]")
        return policy_for_task(state, j)
    if (path / "model.json").exists():
        from .policies import load_model, policy_from_model

        return policy_from_model(load_model(path))
    raise UsageError(f"{path} is neither a model nor a strategy checkpoint")


def cmd_evaluate(args) -> int:
    maze = _maze(args.maze)
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    from .metrics import evaluate_success

    policy = _checkpoint_policy(Path(args.checkpoint), args.task)
    rate = evaluate_success(policy, maze, args.episodes, args.seed)
    print(json.dumps({"maze": maze.name, "episodes": args.episodes, "seed": args.seed, "success": rate}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import metrics_csv, radar_json

    run = Path(args.run)
    path = run / "metrics.json"
    if not path.exists():
        raise UsageError(f"no metrics.json in {run}")
    report = json.loads(path.read_text())
    if args.format == "json":
        sys.stdout.write(path.read_text())
    elif args.format == "csv":
        text = metrics_csv(report)
        (run / "metrics.csv").write_text(text)
        sys.stdout.write(text)
    else:
        text = json.dumps(radar_json(report), indent=1, sort_keys=True) + "\n"
        (run / "radar.json").write_text(text)
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contnav", description="Continual navigation benchmark")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("list-mazes", help="print the built-in mazes").set_defaults(fn=cmd_list_mazes)
    sub.add_parser("list-streams", help="print the built-in task streams").set_defaults(fn=cmd_list_streams)

    g = sub.add_parser("gen-data", help="generate an expert dataset")
    g.add_argument("--maze", required=True)
    g.add_argument("--episodes", type=int, default=None, help="default: 250 SimpleTown / 100 AmazeVille")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-stream", help="train and evaluate methods over a stream")
    t.add_argument("--config", required=True, help="JSON run config")
    t.add_argument("--output-dir", default=None, help="override output_dir from the config")
    t.set_defaults(fn=cmd_train_stream)

    e = sub.add_parser("evaluate", help="success rate of a saved model or strategy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--maze", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--task", type=int, default=None, help="task index for strategy checkpoints")
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("report", help="print a run's metrics")
    r.add_argument("--run", required=True)
    r.add_argument("--format", choices=("csv", "json", "radar"), default="json")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"contnav: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"contnav: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
