"""Shared fixtures: the two published rule trees and a random-tree builder."""

import numpy as np
import pytest

from nldtree.core import (
    EXPONENT_SET,
    Conditional,
    Leaf,
    Nldt,
    NormalizationBounds,
    SplitRule,
)

# CartPole controller published with its normalization constants:
#   if |-0.18*xh0*xh2^-2 - 0.63*xh3^-2 + 0.67| - 0.24 <= 0: action 0 else 1
CARTPOLE_X_MIN = (-0.91, -0.43, -0.05, -0.40)
CARTPOLE_X_MAX = (1.37, 0.88, 0.10, 0.45)

# MountainCar controller: a two-rule cascade of band tests.
#   psi1: |-0.63*xh0^-2 + 0.28*xh1^-1 - 0.22*xh0*xh1 + 0.96| - 0.36
#   psi2: |-0.28*xh0^2 - 0.30*xh1^2 + 1.39| - 0.53
#   not psi1 -> action 0; psi1 and not psi2 -> 1; psi1 and psi2 -> 2
MOUNTAINCAR_X_MIN = (-1.20, -0.06)
MOUNTAINCAR_X_MAX = (0.50, 0.06)


def build_cartpole_tree() -> Nldt:
    rule = SplitRule(
        exponents=((1, 0, -2, 0), (0, 0, 0, -2)),
        weights=(-0.18, -0.63),
        bias1=0.67,
        bias2=0.24,
        modulus=True,
    )
    return Nldt(
        root=Conditional(rule, Leaf.pure(0, 2), Leaf.pure(1, 2)),
        bounds=NormalizationBounds(CARTPOLE_X_MIN, CARTPOLE_X_MAX),
        n_actions=2,
    )


def build_mountaincar_tree(bounds: NormalizationBounds | None = None) -> Nldt:
    psi1 = SplitRule(
        exponents=((-2, 0), (0, -1), (1, 1)),
        weights=(-0.63, 0.28, -0.22),
        bias1=0.96,
        bias2=0.36,
        modulus=True,
    )
    # bias1 = 1.39 sits outside the unit box the optimizers search; the
    # rule form itself allows it, so validation is bypassed on replay.
    psi2 = SplitRule(
        exponents=((2, 0), (0, 2)),
        weights=(-0.28, -0.30),
        bias1=1.39,
        bias2=0.53,
        modulus=True,
        check_box=False,
    )
    inner = Conditional(psi2, Leaf.pure(2, 3), Leaf.pure(1, 3))
    if bounds is None:
        bounds = NormalizationBounds(MOUNTAINCAR_X_MIN, MOUNTAINCAR_X_MAX)
    return Nldt(root=Conditional(psi1, inner, Leaf.pure(0, 3)), bounds=bounds, n_actions=3)


def random_rule(rng: np.random.Generator, d: int, max_terms: int = 3) -> SplitRule:
    p = int(rng.integers(1, max_terms + 1))
    B = np.zeros((p, d), dtype=int)
    nonzero = [e for e in EXPONENT_SET if e]
    for i in range(p):
        B[i, int(rng.integers(d))] = int(rng.choice(nonzero))
        for j in range(d):
            if B[i, j] == 0 and rng.random() < 0.25:
                B[i, j] = int(rng.choice(EXPONENT_SET))
    modulus = bool(rng.random() < 0.5)
    return SplitRule(
        exponents=tuple(tuple(int(b) for b in row) for row in B),
        weights=tuple(float(w) for w in rng.uniform(-1.0, 1.0, p)),
        bias1=float(rng.uniform(-1.0, 1.0)),
        bias2=float(rng.uniform(-1.0, 1.0)) if modulus else None,
        modulus=modulus,
    )


def random_tree(
    rng: np.random.Generator, d: int = 3, n_actions: int = 3, depth: int = 3
) -> Nldt:
    """A structurally valid tree with unit bounds; raw inputs in [0, 1]
    normalize into [1, 2], keeping every power-law term well defined."""

    def build(level: int):
        if level >= depth or (level > 0 and rng.random() < 0.4):
            counts = rng.integers(0, 10, n_actions)
            counts[int(rng.integers(n_actions))] += 10
            return Leaf.from_counts([int(c) for c in counts])
        return Conditional(random_rule(rng, d), build(level + 1), build(level + 1))

    bounds = NormalizationBounds((0.0,) * d, (1.0,) * d)
    return Nldt(build(0), bounds, n_actions)


@pytest.fixture
def cartpole_tree() -> Nldt:
    return build_cartpole_tree()


@pytest.fixture
def mountaincar_tree() -> Nldt:
    return build_mountaincar_tree()
