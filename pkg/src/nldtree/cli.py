"""Command-line pipeline around the tree toolkit.

Each subcommand reads its declared inputs, writes its declared outputs
and nothing else; every file is written to a temporary name first and
renamed into place, so an interrupted run never leaves partial
artifacts.  Training commands emit a manifest recording configuration,
seeds, and content hashes, which is enough to reproduce the artifact
bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .closedloop import (
    ClosedLoopConfig,
    collect_visitation,
    fitness_closed,
    reengineer,
    reoptimize,
)
from .core import (
    Conditional,
    Nldt,
    depth_prefix,
    export_rules,
    iter_nodes,
    tree_from_json,
    tree_to_json,
)
from .data import (
    DataFormatError,
    generate_balanced,
    generate_regular,
    load_csv,
    save_csv,
)
from .envs import ENVIRONMENTS, TreePolicy, make_env, make_scripted_oracle, rollout
from .evaluation import (
    RunReport,
    closed_loop_stats,
    emit_plot_data,
    open_loop_accuracy,
    report_to_json,
)
from .openloop import BilevelConfig, induce_tree
from .openloop import prune as prune_tree

JOBS_ENV_VAR = "NLDTREE_JOBS"

_DATA_ERRORS = (
    DataFormatError,
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
    PermissionError,
)


class UsageError(Exception):
    """Bad flag value that argparse's own checks cannot catch."""


def _write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_tree(path: str | Path) -> Nldt:
    try:
        return tree_from_json(Path(path).read_text())
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def _load_config(path: str | None, cls, overrides: dict):
    fields = {}
    if path is not None:
        try:
            fields = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        if not isinstance(fields, dict):
            raise DataFormatError(f"{path}: config must be a JSON object")
    fields.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**fields)
    except TypeError as exc:
        raise DataFormatError(f"config: {exc}") from exc


def _resolve_jobs(value: int | None) -> int:
    if value is not None:
        return value
    raw = os.environ.get(JOBS_ENV_VAR, "1")
    try:
        jobs = int(raw)
    except ValueError:
        raise UsageError(f"{JOBS_ENV_VAR}={raw!r} is not an integer") from None
    if jobs < 1:
        raise UsageError(f"{JOBS_ENV_VAR} must be positive, got {jobs}")
    return jobs


def _make_oracle(spec: str, env_name: str):
    if spec == "scripted":
        return make_scripted_oracle(env_name)
    if spec.startswith("tree:"):
        return TreePolicy(_load_tree(spec[len("tree:"):]))
    raise UsageError(f"oracle must be 'scripted' or 'tree:<path>', got {spec!r}")


def _manifest(
    command: str,
    config,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
    wall_time_s: float,
    extra: dict | None = None,
) -> str:
    doc = {
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(),
        "config": asdict(config),
        "seeds": {"master": config.seed},
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in outputs.items()},
        "wall_time_s": wall_time_s,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _cmd_gen_data(args: argparse.Namespace) -> int:
    env = make_env(args.env)
    oracle = _make_oracle(args.oracle, args.env)
    generate = generate_regular if args.mode == "regular" else generate_balanced
    dataset = generate(env, oracle, args.n, args.seed)
    out = Path(args.out)
    tmp = out.with_name(f".{out.name}.{os.getpid()}")
    save_csv(dataset, tmp)
    try:
        os.replace(tmp, out)
        os.replace(tmp.with_suffix(".meta.json"), out.with_suffix(".meta.json"))
    except BaseException:
        for leftover in (tmp, tmp.with_suffix(".meta.json")):
            try:
                os.unlink(leftover)
            except OSError:
                pass
        raise
    return 0


def _cmd_train_open(args: argparse.Namespace) -> int:
    dataset = load_csv(args.data)
    cfg = _load_config(
        args.config,
        BilevelConfig,
        {
            "lower_solver": args.lower,
            "seed": args.seed,
            "jobs": _resolve_jobs(args.jobs),
        },
    )
    stats: list = []
    t0 = time.perf_counter()
    tree = induce_tree(dataset, cfg, stats)
    elapsed = time.perf_counter() - t0
    _write_atomic(args.out, tree_to_json(tree))
    _write_atomic(
        str(args.out) + ".manifest.json",
        _manifest(
            "train-open",
            cfg,
            {"data": args.data},
            {"tree": args.out},
            elapsed,
            {"nodes": [asdict(s) for s in stats]},
        ),
    )
    return 0


def _cmd_prune(args: argparse.Namespace) -> int:
    tree = _load_tree(args.tree)
    validation = load_csv(args.val)
    pruned = prune_tree(tree, validation, args.tolerance)
    _write_atomic(args.out, tree_to_json(pruned))
    return 0


def _cmd_prefix(args: argparse.Namespace) -> int:
    tree = _load_tree(args.tree)
    _write_atomic(args.out, tree_to_json(depth_prefix(tree, args.depth)))
    return 0


def _cmd_train_closed(args: argparse.Namespace) -> int:
    tree = _load_tree(args.tree)
    env = make_env(args.env)
    cfg = _load_config(
        args.config,
        ClosedLoopConfig,
        {
            "seed": args.seed,
            "generations": args.generations,
            "jobs": _resolve_jobs(args.jobs),
        },
    )
    checkpoint_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    on_generation = None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

        def on_generation(gen: int, incumbent: Nldt, best: float, mean: float) -> None:
            _write_atomic(checkpoint_dir / f"gen_{gen:04d}.json", tree_to_json(incumbent))

    t0 = time.perf_counter()
    result = reoptimize(tree, env, cfg, on_generation)
    elapsed = time.perf_counter() - t0
    _write_atomic(args.out, tree_to_json(result.tree))
    _write_atomic(args.curve, emit_plot_data("training_curve", result.curve))
    _write_atomic(
        str(args.out) + ".manifest.json",
        _manifest(
            "train-closed",
            cfg,
            {"tree": args.tree},
            {"tree": args.out, "curve": args.curve},
            elapsed,
            {"env": args.env, "best_fitness": result.best_fitness},
        ),
    )
    return 0


def _cmd_reengineer(args: argparse.Namespace) -> int:
    tree = _load_tree(args.tree)
    env = make_env(args.env)
    profile = collect_visitation(tree, env, args.samples, args.seed)
    _write_atomic(args.out, tree_to_json(reengineer(tree, profile)))
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    tree = _load_tree(args.tree)
    env = make_env(args.env)
    jobs = _resolve_jobs(args.jobs)
    wall: dict[str, float] = {}
    train_acc = test_acc = None
    if args.train_data:
        t0 = time.perf_counter()
        train_acc = open_loop_accuracy(tree, load_csv(args.train_data))
        wall["train_accuracy"] = time.perf_counter() - t0
    if args.test_data:
        t0 = time.perf_counter()
        test_acc = open_loop_accuracy(tree, load_csv(args.test_data))
        wall["test_accuracy"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    stats = closed_loop_stats(
        tree, env, batches=args.batches, episodes=args.episodes, seed=args.seed, jobs=jobs
    )
    wall["closed_loop"] = time.perf_counter() - t0
    lengths = tree.rule_lengths()
    report = RunReport(
        train_accuracy=train_acc,
        test_accuracy=test_acc,
        rule_count=tree.n_rules,
        mean_rule_length=float(np.mean(lengths)) if lengths else 0.0,
        completion_mean=stats.completion_mean,
        completion_std=stats.completion_std,
        reward_mean=stats.reward_mean,
        reward_std=stats.reward_std,
        seeds={"eval": args.seed},
        wall_times_s=wall,
    )
    _write_atomic(args.report, report_to_json(report))
    print(
        f"completion {stats.completion_mean:.2f} +- {stats.completion_std:.2f} %  "
        f"reward {stats.reward_mean:.2f} +- {stats.reward_std:.2f}"
    )
    return 0


def _rules_csv(tree: Nldt) -> str:
    d = tree.d
    header = ["path", "term", "weight"] + [f"b{j}" for j in range(d)]
    header += ["theta1", "theta2", "m"]
    lines = [",".join(header)]
    for path, node in iter_nodes(tree):
        if not isinstance(node, Conditional):
            continue
        rule = node.rule
        theta2 = "" if rule.bias2 is None else repr(rule.bias2)
        for i, (w, row) in enumerate(zip(rule.weights, rule.exponents)):
            lines.append(
                ",".join(
                    [path or "root", str(i), repr(w)]
                    + [str(b) for b in row]
                    + [repr(rule.bias1), theta2, str(int(rule.modulus))]
                )
            )
    return "\n".join(lines) + "\n"


def _cmd_export(args: argparse.Namespace) -> int:
    tree = _load_tree(args.tree)
    if args.format == "text":
        sys.stdout.write(export_rules(tree))
    elif args.format == "json":
        sys.stdout.write(tree_to_json(tree))
    else:
        sys.stdout.write(_rules_csv(tree))
    return 0


def _cmd_rollout(args: argparse.Namespace) -> int:
    tree = _load_tree(args.tree)
    env = make_env(args.env)
    episode = rollout(env, TreePolicy(tree), args.seed)
    d = episode.states.shape[1] if len(episode) else env.state_dim
    lines = [",".join(["t"] + [f"x{j}" for j in range(d)] + ["action", "reward"])]
    for t in range(len(episode)):
        lines.append(
            ",".join(
                [str(t)]
                + [repr(float(v)) for v in episode.states[t]]
                + [str(int(episode.actions[t])), repr(float(episode.rewards[t]))]
            )
        )
    _write_atomic(args.trace, "\n".join(lines) + "\n")
    print(
        f"steps {len(episode)}  reward {episode.cumulative_reward:.2f}  "
        f"success {episode.success}"
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nldtree",
        description="Induce, tune, and evaluate nonlinear decision tree policies.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    env_names = sorted(ENVIRONMENTS)

    p = sub.add_parser("gen-data", help="record a labeled state-action dataset")
    p.add_argument("--env", required=True, choices=env_names)
    p.add_argument("--oracle", default="scripted", help="'scripted' or 'tree:<path>'")
    p.add_argument("--mode", default="regular", choices=("regular", "balanced"))
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-open", help="induce a tree from labeled data")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON file of optimizer settings")
    p.add_argument("--lower", choices=("rga", "local"))
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_open)

    p = sub.add_parser("prune", help="reduced-error pruning on held-out data")
    p.add_argument("--tree", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--tolerance", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("prefix", help="keep only the top of the tree")
    p.add_argument("--tree", required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prefix)

    p = sub.add_parser("train-closed", help="re-optimize coefficients on reward")
    p.add_argument("--tree", required=True)
    p.add_argument("--env", required=True, choices=env_names)
    p.add_argument("--config", help="JSON file of GA settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", required=True)
    p.set_defaults(func=_cmd_train_closed)

    p = sub.add_parser("reengineer", help="drop never-visited branches")
    p.add_argument("--tree", required=True)
    p.add_argument("--env", required=True, choices=env_names)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reengineer)

    p = sub.add_parser("evaluate", help="closed-loop statistics and report")
    p.add_argument("--tree", required=True)
    p.add_argument("--env", required=True, choices=env_names)
    p.add_argument("--batches", type=int, default=50)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int)
    p.add_argument("--train-data")
    p.add_argument("--test-data")
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("export", help="print the tree in a chosen format")
    p.add_argument("--tree", required=True)
    p.add_argument("--format", default="text", choices=("text", "json", "csv-rules"))
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("rollout", help="run one episode and dump its trace")
    p.add_argument("--tree", required=True)
    p.add_argument("--env", required=True, choices=env_names)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", required=True)
    p.set_defaults(func=_cmd_rollout)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # runtime fault, single-line diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
