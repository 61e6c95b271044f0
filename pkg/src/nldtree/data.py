"""Labeled state-action datasets: oracle tracing, balancing, bounds, CSV io.

Training data is collected open-loop: a generating policy drives seeded
episodes and every visited (state, action) pair is recorded, either as-is
(regular mode) or capped per action so class counts come out near-equal
(balanced mode).  Normalization bounds are always computed from the
training set and travel with the induced tree, never with the dataset.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import NormalizationBounds
from .envs import Environment, Policy


class DataFormatError(ValueError):
    """A dataset file does not match the expected CSV schema."""


@dataclass
class DatasetMeta:
    env: str
    oracle: str
    seed: int
    n_total: int
    mode: str
    class_counts: list[int]
    truncated: bool = False


@dataclass
class LabeledDataset:
    """(state, action) pairs with the action space size they came from."""

    states: np.ndarray
    actions: np.ndarray
    n_actions: int
    meta: DatasetMeta | None = None

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=int)
        if self.states.ndim != 2:
            raise ValueError("states must be a 2-D array")
        if len(self.states) != len(self.actions):
            raise ValueError("states and actions lengths differ")
        if len(self.actions) and not (
            self.actions.min() >= 0 and self.actions.max() < self.n_actions
        ):
            raise ValueError("actions outside 0..n_actions-1")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.actions, minlength=self.n_actions)


def _trace_episodes(env: Environment, oracle: Policy, seed: int):
    """Yield per-episode lists of (state, action) pairs, forever."""
    rng = np.random.default_rng(seed)
    while True:
        state = env.reset(int(rng.integers(2**63)))
        pairs = []
        done = False
        while not done:
            action = oracle.act(state)
            pairs.append((state, action))
            state, _, done, _ = env.step(action)
        yield pairs


def generate_regular(
    env: Environment, oracle: Policy, n_total: int, seed: int
) -> LabeledDataset:
    """Record the first `n_total` oracle pairs from sequential seeded episodes."""
    if n_total < 1:
        raise ValueError("n_total must be positive")
    states: list = []
    actions: list[int] = []
    for pairs in _trace_episodes(env, oracle, seed):
        for state, action in pairs:
            states.append(state)
            actions.append(action)
            if len(actions) == n_total:
                ds = LabeledDataset(np.array(states), np.array(actions), env.n_actions)
                ds.meta = _make_meta(env, oracle, seed, n_total, "regular", ds)
                return ds


def generate_balanced(
    env: Environment, oracle: Policy, n_total: int, seed: int
) -> LabeledDataset:
    """Like `generate_regular` but with per-action caps of ceil(n_total / n_actions).

    Pairs whose action class is already full are discarded.  If the oracle
    starves some class, generation aborts once the episode count exceeds
    10x the episodes a full dataset should need (estimated from the mean
    episode length seen so far) and the partial dataset is returned with
    its meta marked truncated.
    """
    if n_total < 1:
        raise ValueError("n_total must be positive")
    cap = math.ceil(n_total / env.n_actions)
    counts = [0] * env.n_actions
    states: list = []
    actions: list[int] = []
    episodes = 0
    steps_seen = 0
    for pairs in _trace_episodes(env, oracle, seed):
        for state, action in pairs:
            if counts[action] < cap:
                counts[action] += 1
                states.append(state)
                actions.append(action)
                if len(actions) == n_total:
                    ds = LabeledDataset(np.array(states), np.array(actions), env.n_actions)
                    ds.meta = _make_meta(env, oracle, seed, n_total, "balanced", ds)
                    return ds
        episodes += 1
        steps_seen += len(pairs)
        mean_len = steps_seen / episodes
        if episodes >= 10 * max(1.0, n_total / mean_len):
            break
    ds = LabeledDataset(np.array(states), np.array(actions), env.n_actions)
    ds.meta = _make_meta(env, oracle, seed, n_total, "balanced", ds, truncated=True)
    return ds


def _make_meta(
    env: Environment,
    oracle: Policy,
    seed: int,
    n_total: int,
    mode: str,
    ds: LabeledDataset,
    truncated: bool = False,
) -> DatasetMeta:
    return DatasetMeta(
        env=type(env).__name__,
        oracle=type(oracle).__name__,
        seed=seed,
        n_total=n_total,
        mode=mode,
        class_counts=[int(c) for c in ds.class_counts()],
        truncated=truncated,
    )


def compute_bounds(dataset: LabeledDataset) -> NormalizationBounds:
    """Per-feature [min, max] over the dataset's states."""
    if len(dataset) < 2:
        raise ValueError("need at least two samples to compute bounds")
    lo = dataset.states.min(axis=0)
    hi = dataset.states.max(axis=0)
    for j in range(dataset.d):
        if lo[j] == hi[j]:
            raise ValueError(f"feature {j} is constant ({lo[j]!r}); cannot normalize")
    return NormalizationBounds(tuple(float(v) for v in lo), tuple(float(v) for v in hi))


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def save_csv(dataset: LabeledDataset, path: str | Path) -> None:
    """Write `x0,..,x{d-1},action` rows at full float precision, plus a meta sidecar."""
    path = Path(path)
    header = ",".join(f"x{j}" for j in range(dataset.d)) + ",action"
    lines = [header]
    for row, action in zip(dataset.states, dataset.actions):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(action)}")
    path.write_text("\n".join(lines) + "\n")
    if dataset.meta is not None:
        _meta_path(path).write_text(json.dumps(asdict(dataset.meta), indent=2) + "\n")


def load_csv(path: str | Path, n_actions: int | None = None) -> LabeledDataset:
    """Parse a dataset CSV; schema errors carry 1-based line numbers."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[-1] != "action" or len(header) < 2:
        raise DataFormatError(f"{path}:1: header must be x0,..,x{{d-1}},action")
    d = len(header) - 1
    if header[:-1] != [f"x{j}" for j in range(d)]:
        raise DataFormatError(f"{path}:1: header must be x0,..,x{d - 1},action")

    states = np.empty((len(lines) - 1, d))
    actions = np.empty(len(lines) - 1, dtype=int)
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != d + 1:
            raise DataFormatError(f"{path}:{i}: expected {d + 1} columns, got {len(cells)}")
        try:
            states[i - 2] = [float(c) for c in cells[:-1]]
            actions[i - 2] = int(cells[-1])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{i}: {exc}") from exc

    meta = None
    meta_path = _meta_path(path)
    if meta_path.exists():
        try:
            meta = DatasetMeta(**json.loads(meta_path.read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{meta_path}: malformed meta sidecar: {exc}") from exc
    if n_actions is None:
        if meta is not None:
            n_actions = len(meta.class_counts)
        elif len(actions):
            n_actions = int(actions.max()) + 1
        else:
            raise DataFormatError(f"{path}: cannot infer n_actions from an empty dataset")
    try:
        return LabeledDataset(states, actions, n_actions, meta)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def trace_dataset(env: Environment, policy: Policy, n_total: int, seed: int) -> LabeledDataset:
    """Alias of `generate_regular` named for its evaluation-side use:
    recording the state-action distribution an already-trained policy induces."""
    return generate_regular(env, policy, n_total, seed)
