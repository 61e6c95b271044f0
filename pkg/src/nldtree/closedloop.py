"""Closed-loop re-optimization and visitation-guided simplification.

Open-loop induction fixes which state products each rule multiplies;
here the remaining continuous coefficients are tuned directly against
episodic reward, and afterwards the parts of the tree that control
never exercises are cut away.
"""

from __future__ import annotations

from dataclasses import dataclass
from multiprocessing import get_context
from typing import Callable, Sequence

import numpy as np

from .core import (
    Conditional,
    Leaf,
    Nldt,
    NldtNode,
    eval_rule,
    flatten,
    inject,
    iter_nodes,
    normalize,
)
from .envs import Environment, TreePolicy, rollout
from .operators import (
    derive_seed,
    polynomial_mutation,
    sbx_crossover,
    tournament_pick,
)

__all__ = [
    "ClosedLoopConfig",
    "ClosedLoopResult",
    "VisitationProfile",
    "fitness_closed",
    "reoptimize",
    "collect_visitation",
    "reengineer",
]


@dataclass(frozen=True)
class ClosedLoopConfig:
    """Settings for reward-driven coefficient search.

    `episodes` is the M of the fitness average.  Episode seeds are
    shared by every individual within a generation so fitness
    differences come from the coefficients, not the draws; with
    `refresh_seeds` the shared seeds change each generation and the
    carried-over elite is re-scored on them like everyone else.
    """

    episodes: int = 20
    generations: int = 30
    pop: int = 40
    eta_c: float = 15.0
    eta_m: float = 20.0
    crossover_prob: float = 0.9
    mutation_prob: float | None = None  # default 1/(number of coefficients)
    sigma_init: float = 0.1
    refresh_seeds: bool = True
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ValueError("need at least one episode per evaluation")
        if self.pop < 2:
            raise ValueError("population must hold at least two individuals")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        if self.jobs < 1:
            raise ValueError("jobs must be positive")


@dataclass(frozen=True)
class ClosedLoopResult:
    """Re-optimized tree plus its training curve.

    `curve` has one (generation, best, mean) row per scored generation.
    """

    tree: Nldt
    curve: tuple[tuple[int, float, float], ...]
    best_fitness: float


def fitness_closed(
    tree: Nldt,
    env: Environment,
    cfg: ClosedLoopConfig,
    episode_seeds: Sequence[int] | None = None,
) -> float:
    """Mean cumulative reward of the tree policy over seeded episodes."""
    if episode_seeds is None:
        episode_seeds = [
            derive_seed(cfg.seed, ("episode", i)) for i in range(cfg.episodes)
        ]
    policy = TreePolicy(tree)
    total = 0.0
    for s in episode_seeds:
        total += rollout(env, policy, s).cumulative_reward
    return total / len(episode_seeds)


_CL_CTX: dict = {}


def _init_cl_worker(tree: Nldt, env: Environment) -> None:
    _CL_CTX["tree"] = tree
    _CL_CTX["env"] = env


def _cl_task(args: tuple[np.ndarray, tuple[int, ...]]) -> float:
    vector, seeds = args
    policy = TreePolicy(inject(_CL_CTX["tree"], vector))
    env = _CL_CTX["env"]
    total = 0.0
    for s in seeds:
        total += rollout(env, policy, s).cumulative_reward
    return total / len(seeds)


def reoptimize(
    tree: Nldt,
    env: Environment,
    cfg: ClosedLoopConfig,
    on_generation: Callable[[int, Nldt, float, float], None] | None = None,
) -> ClosedLoopResult:
    """Tune the tree's coefficients by an elitist real-coded GA on reward.

    Topology, exponent matrices, and modulus flags never change; the
    search runs over the flattened coefficient vector, seeded with the
    input tree and Gaussian perturbations of it.  Variation stays in
    [-1, 1] per gene, widened only where the input tree itself lies
    outside, so replaying a published rule is representable.
    """
    flat0 = flatten(tree)
    n = len(flat0)
    if cfg.generations == 0 or n == 0:
        return ClosedLoopResult(
            tree=tree, curve=(), best_fitness=fitness_closed(tree, env, cfg)
        )

    low = np.minimum(-1.0, flat0)
    high = np.maximum(1.0, flat0)
    mut_prob = cfg.mutation_prob if cfg.mutation_prob is not None else 1.0 / n
    init_rng = np.random.default_rng(derive_seed(cfg.seed, "closed-init"))
    pop = np.empty((cfg.pop, n))
    pop[0] = flat0
    for i in range(1, cfg.pop):
        pop[i] = np.clip(
            flat0 + init_rng.normal(0.0, cfg.sigma_init, n), -1.0, 1.0
        )

    pool = None
    if cfg.jobs > 1:
        pool = get_context("fork").Pool(
            cfg.jobs, initializer=_init_cl_worker, initargs=(tree, env)
        )
    _init_cl_worker(tree, env)

    def score(generation: int) -> np.ndarray:
        gen_key = generation if cfg.refresh_seeds else 0
        seeds = tuple(
            derive_seed(cfg.seed, ("gen", gen_key, i)) for i in range(cfg.episodes)
        )
        tasks = [(pop[i], seeds) for i in range(cfg.pop)]
        if pool is not None:
            return np.array(pool.map(_cl_task, tasks))
        return np.array([_cl_task(t) for t in tasks])

    try:
        curve: list[tuple[int, float, float]] = []
        best_v = flat0
        best_f = -np.inf
        for gen in range(1, cfg.generations + 1):
            fits = score(gen)
            k = int(np.argmax(fits))
            best_v, best_f = pop[k].copy(), float(fits[k])
            curve.append((gen, best_f, float(fits.mean())))
            if on_generation is not None:
                on_generation(gen, inject(tree, best_v), best_f, float(fits.mean()))
            if gen == cfg.generations:
                break

            var_rng = np.random.default_rng(derive_seed(cfg.seed, ("var", gen)))

            def better(i: int, j: int) -> bool:
                return fits[i] > fits[j]

            children = [best_v.copy()]
            while len(children) < cfg.pop:
                a = tournament_pick(var_rng, cfg.pop, better)
                b = tournament_pick(var_rng, cfg.pop, better)
                c1, c2 = pop[a].copy(), pop[b].copy()
                if var_rng.uniform() < cfg.crossover_prob:
                    c1, c2 = sbx_crossover(var_rng, pop[a], pop[b], cfg.eta_c, low, high)
                children.append(
                    polynomial_mutation(var_rng, c1, cfg.eta_m, mut_prob, low, high)
                )
                if len(children) < cfg.pop:
                    children.append(
                        polynomial_mutation(var_rng, c2, cfg.eta_m, mut_prob, low, high)
                    )
            pop = np.array(children)
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    return ClosedLoopResult(
        tree=inject(tree, best_v), curve=tuple(curve), best_fitness=best_f
    )


@dataclass(frozen=True)
class VisitationProfile:
    """Closed-loop traffic through a tree.

    `visits` counts every node by its L/R path from the root;
    `emissions` counts, per leaf path, how often each action was issued.
    For every conditional, the two child counts sum to its own.
    """

    visits: dict[str, int]
    emissions: dict[str, dict[int, int]]
    n_samples: int


def collect_visitation(
    tree: Nldt, env: Environment, n_samples: int, seed: int
) -> VisitationProfile:
    """Roll out the tree policy until `n_samples` state-action pairs are
    recorded, counting each prediction's path through the tree."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    visits = {path: 0 for path, _ in iter_nodes(tree)}
    emissions: dict[str, dict[int, int]] = {
        path: {} for path, node in iter_nodes(tree) if isinstance(node, Leaf)
    }
    recorded = 0
    episode = 0
    while recorded < n_samples:
        state = env.reset(derive_seed(seed, ("visit", episode)))
        episode += 1
        done = False
        while not done and recorded < n_samples:
            xh = normalize(state, tree.bounds)
            path = ""
            node = tree.root
            visits[path] += 1
            while isinstance(node, Conditional):
                if eval_rule(node.rule, xh) <= 0.0:
                    node, path = node.left, path + "L"
                else:
                    node, path = node.right, path + "R"
                visits[path] += 1
            counter = emissions[path]
            counter[node.action] = counter.get(node.action, 0) + 1
            recorded += 1
            state, _, done, _ = env.step(node.action)
    return VisitationProfile(visits=visits, emissions=emissions, n_samples=n_samples)


def reengineer(tree: Nldt, profile: VisitationProfile) -> Nldt:
    """Cut never-visited branches and relabel leaves from emissions.

    A conditional with one zero-visit child routes every profiled state
    the other way, so the visited child's subtree replaces it outright;
    the cut cascades bottom-up in one traversal, which is already the
    fixpoint for a fixed profile.  Visited leaves take the action their
    traffic actually shows (its counts become the leaf's support);
    unvisited leaves keep their training labels.
    """
    expected = {path for path, _ in iter_nodes(tree)}
    if set(profile.visits) != expected:
        raise ValueError("visitation profile does not match the tree")

    def rebuild(node: NldtNode, path: str) -> NldtNode:
        if isinstance(node, Leaf):
            counter = profile.emissions.get(path, {})
            if counter:
                counts = [0] * tree.n_actions
                for action, count in counter.items():
                    counts[action] = count
                return Leaf.from_counts(counts)
            return node
        left_visits = profile.visits[path + "L"]
        right_visits = profile.visits[path + "R"]
        if left_visits == 0 and right_visits > 0:
            return rebuild(node.right, path + "R")
        if right_visits == 0 and left_visits > 0:
            return rebuild(node.left, path + "L")
        return Conditional(
            node.rule, rebuild(node.left, path + "L"), rebuild(node.right, path + "R")
        )

    return Nldt(
        root=rebuild(tree.root, ""), bounds=tree.bounds, n_actions=tree.n_actions
    )
