"""Fidelity and control-performance measurement, plus plot-data export.

Open-loop numbers say how faithfully a tree mimics its labels;
closed-loop numbers say how well it actually drives the plant.  Both
go into one serializable report so a run's outcome is a single file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from multiprocessing import get_context
from typing import Sequence

import numpy as np

from .core import Nldt, predict_batch
from .data import LabeledDataset
from .envs import Environment, TreePolicy, rollout
from .operators import derive_seed

__all__ = [
    "RunReport",
    "ClosedLoopStats",
    "open_loop_accuracy",
    "closed_loop_stats",
    "emit_plot_data",
    "emit_plot_svg",
    "report_to_json",
    "report_from_json",
]


@dataclass(frozen=True)
class ClosedLoopStats:
    """Batch statistics of seeded rollouts.

    Means and stds are taken across batches; std is the population
    form, so a run where every batch completes everything reports
    exactly 0.
    """

    completion_mean: float
    completion_std: float
    reward_mean: float
    reward_std: float
    batch_completion: tuple[float, ...]
    batch_reward: tuple[float, ...]

    def __post_init__(self) -> None:
        if not 0.0 <= self.completion_mean <= 100.0:
            raise ValueError("completion is a percentage")
        if self.completion_std < 0.0 or self.reward_std < 0.0:
            raise ValueError("std must be non-negative")


@dataclass(frozen=True)
class RunReport:
    """One evaluation run's results in plain numbers.

    Open-loop accuracies are percentages; `mean_rule_length` is the
    mean nonzero-exponent count per rule.  Closed-loop fields mirror
    ClosedLoopStats and may be absent when only fidelity was measured.
    """

    train_accuracy: float | None = None
    test_accuracy: float | None = None
    rule_count: int = 0
    mean_rule_length: float = 0.0
    completion_mean: float | None = None
    completion_std: float | None = None
    reward_mean: float | None = None
    reward_std: float | None = None
    seeds: dict[str, int] | None = None
    wall_times_s: dict[str, float] | None = None

    def __post_init__(self) -> None:
        for name in ("train_accuracy", "test_accuracy", "completion_mean"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} must be a percentage, got {value!r}")
        for name in ("completion_std", "reward_std"):
            value = getattr(self, name)
            if value is not None and value < 0.0:
                raise ValueError(f"{name} must be non-negative")


def report_to_json(report: RunReport) -> str:
    return json.dumps(asdict(report), indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> RunReport:
    return RunReport(**json.loads(text))


def open_loop_accuracy(tree: Nldt, dataset: LabeledDataset) -> float:
    """Percent of rows where the tree reproduces the recorded action."""
    if len(dataset.actions) == 0:
        raise ValueError("dataset is empty")
    agree = predict_batch(tree, dataset.states) == dataset.actions
    return 100.0 * float(np.mean(agree))


_STATS_CTX: dict = {}


def _init_stats_worker(tree: Nldt, env: Environment) -> None:
    _STATS_CTX["policy"] = TreePolicy(tree)
    _STATS_CTX["env"] = env


def _run_batch(seeds: tuple[int, ...]) -> tuple[float, float]:
    policy, env = _STATS_CTX["policy"], _STATS_CTX["env"]
    successes = 0
    reward = 0.0
    for s in seeds:
        episode = rollout(env, policy, s)
        successes += episode.success
        reward += episode.cumulative_reward
    return 100.0 * successes / len(seeds), reward / len(seeds)


def closed_loop_stats(
    tree: Nldt,
    env: Environment,
    batches: int = 50,
    episodes: int = 100,
    seed: int = 0,
    jobs: int = 1,
) -> ClosedLoopStats:
    """Completion rate and mean reward over `batches` x `episodes`
    seeded rollouts, aggregated across batches.

    Every episode's seed is fixed up front by (master seed, batch,
    index), so results are identical for any worker count.
    """
    if batches < 1 or episodes < 1:
        raise ValueError("need at least one batch and one episode")
    batch_seeds = [
        tuple(derive_seed(seed, ("batch", b, e)) for e in range(episodes))
        for b in range(batches)
    ]
    _init_stats_worker(tree, env)
    if jobs > 1:
        with get_context("fork").Pool(
            jobs, initializer=_init_stats_worker, initargs=(tree, env)
        ) as pool:
            results = pool.map(_run_batch, batch_seeds)
    else:
        results = [_run_batch(s) for s in batch_seeds]
    completion = np.array([r[0] for r in results])
    reward = np.array([r[1] for r in results])
    return ClosedLoopStats(
        completion_mean=float(completion.mean()),
        completion_std=float(completion.std()),
        reward_mean=float(reward.mean()),
        reward_std=float(reward.std()),
        batch_completion=tuple(float(c) for c in completion),
        batch_reward=tuple(float(r) for r in reward),
    )


PLOT_KINDS = ("state_scatter", "action_vs_time", "training_curve")


def emit_plot_data(kind: str, source) -> str:
    """Tidy CSV for one plot.

    state_scatter: source = (states (n, d), actions (n,)); columns
    x0..x{d-1},action.  action_vs_time: source = actions; columns
    t,action.  training_curve: source = (generation, best, mean) rows.
    An empty source still yields the header line.
    """
    if kind == "state_scatter":
        states, actions = source
        states = np.asarray(states, dtype=float)
        d = states.shape[1] if states.ndim == 2 else 0
        lines = [",".join([f"x{j}" for j in range(d)] + ["action"])]
        for row, action in zip(states, actions):
            lines.append(",".join([repr(float(v)) for v in row] + [str(int(action))]))
    elif kind == "action_vs_time":
        lines = ["t,action"]
        for t, action in enumerate(source):
            lines.append(f"{t},{int(action)}")
    elif kind == "training_curve":
        lines = ["generation,best,mean"]
        for gen, best, mean in source:
            lines.append(f"{int(gen)},{repr(float(best))},{repr(float(mean))}")
    else:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    return "\n".join(lines) + "\n"


_SVG_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _svg_header(width: int, height: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]


def _scaler(values: np.ndarray, span: float, margin: float):
    lo, hi = float(values.min()), float(values.max())
    width = hi - lo if hi > lo else 1.0
    return lambda v: margin + (v - lo) / width * span


def emit_plot_svg(kind: str, source, width: int = 640, height: int = 480) -> str:
    """Self-contained SVG rendering of the same sources emit_plot_data
    accepts: scatter for states, step lines for the two curve kinds."""
    margin = 40.0
    span_x, span_y = width - 2 * margin, height - 2 * margin
    parts = _svg_header(width, height)
    if kind == "state_scatter":
        states, actions = source
        states = np.asarray(states, dtype=float)
        if len(states):
            sx = _scaler(states[:, 0], span_x, margin)
            sy = _scaler(states[:, 1] if states.shape[1] > 1 else states[:, 0], span_y, margin)
            for row, action in zip(states, actions):
                color = _SVG_COLORS[int(action) % len(_SVG_COLORS)]
                parts.append(
                    f'<circle cx="{sx(row[0]):.1f}" '
                    f'cy="{height - sy(row[1] if len(row) > 1 else row[0]):.1f}" '
                    f'r="2" fill="{color}" fill-opacity="0.6"/>'
                )
    elif kind in ("action_vs_time", "training_curve"):
        if kind == "action_vs_time":
            ys = np.asarray(list(source), dtype=float).reshape(-1, 1)
        else:
            ys = np.asarray([(row[1], row[2]) for row in source], dtype=float).reshape(
                -1, 2
            )
        if len(ys):
            xs = np.arange(len(ys), dtype=float)
            sx = _scaler(xs, span_x, margin)
            sy = _scaler(ys.ravel(), span_y, margin)
            for k in range(ys.shape[1]):
                points = " ".join(
                    f"{sx(x):.1f},{height - sy(y):.1f}" for x, y in zip(xs, ys[:, k])
                )
                parts.append(
                    f'<polyline points="{points}" fill="none" '
                    f'stroke="{_SVG_COLORS[k]}" stroke-width="1.5"/>'
                )
    else:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
