"""Real-coded genetic operators shared by the coefficient optimizers.

Simulated binary crossover and polynomial mutation in their standard
non-adaptive forms.  Both act per variable inside a fixed box and draw
all randomness from the generator passed in, so callers stay
reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def sbx_crossover(
    rng: np.random.Generator,
    p1: np.ndarray,
    p2: np.ndarray,
    eta: float,
    low: float = -1.0,
    high: float = 1.0,
    swap_prob: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulated binary crossover of two parent vectors.

    Each variable is blended independently with probability `swap_prob`;
    the spread factor follows beta = (2u)^(1/(eta+1)) for u <= 0.5 and
    (1/(2(1-u)))^(1/(eta+1)) otherwise.
    """
    n = len(p1)
    u = rng.random(n)
    beta = np.where(
        u <= 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)),
        (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0)),
    )
    blend = rng.random(n) <= swap_prob
    beta = np.where(blend, beta, 1.0)
    c1 = 0.5 * ((1.0 + beta) * p1 + (1.0 - beta) * p2)
    c2 = 0.5 * ((1.0 - beta) * p1 + (1.0 + beta) * p2)
    return np.clip(c1, low, high), np.clip(c2, low, high)


def polynomial_mutation(
    rng: np.random.Generator,
    x: np.ndarray,
    eta: float,
    prob: float,
    low: float = -1.0,
    high: float = 1.0,
) -> np.ndarray:
    """Polynomial mutation: perturb each variable with probability `prob`.

    delta = (2r)^(1/(eta+1)) - 1 for r < 0.5, else 1 - (2(1-r))^(1/(eta+1)),
    scaled by the box width.
    """
    n = len(x)
    mutate = rng.random(n) < prob
    r = rng.random(n)
    delta = np.where(
        r < 0.5,
        (2.0 * r) ** (1.0 / (eta + 1.0)) - 1.0,
        1.0 - (2.0 * (1.0 - r)) ** (1.0 / (eta + 1.0)),
    )
    y = np.where(mutate, x + delta * (high - low), x)
    return np.clip(y, low, high)


def tournament_pick(
    rng: np.random.Generator, n: int, better: "callable", size: int = 2
) -> int:
    """Index of the winner among `size` uniformly drawn contestants.

    `better(i, j)` returns True when individual i beats individual j.
    """
    best = int(rng.integers(n))
    for _ in range(size - 1):
        challenger = int(rng.integers(n))
        if better(challenger, best):
            best = challenger
    return best


def derive_seed(master_seed: int, key) -> int:
    """Stable sub-seed for a named piece of work.

    Hashing (master seed, key) decouples each consumer's random stream
    from evaluation order, so parallel and serial runs see identical
    randomness.
    """
    digest = hashlib.blake2b(repr((master_seed, key)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")
