"""Open-loop tree induction by bilevel search over split rules.

Each split is found by a two-level optimization.  The upper level walks
the discrete space of exponent matrices B and the modulus flag m,
minimizing rule complexity F_U (the count of nonzero exponents) subject
to the split being able to reach a net impurity F_L no worse than
`tau_impurity`.  The lower level, given (B, m), tunes the continuous
coefficients w and theta inside [-1, 1] to minimize F_L, either with a
real-coded GA or with a derivative-based local optimizer run on a
sigmoid-smoothed surrogate of F_L from a dipole start.

Trees are grown CART-style: split the node's data with the winning rule
and recurse until purity, depth, or node-size limits apply.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import minimize

from .core import (
    EXPONENT_SET,
    Conditional,
    Leaf,
    Nldt,
    NldtNode,
    SplitRule,
    eval_rule_batch,
    iter_nodes,
    normalize_batch,
    predict_batch,
)
from .data import LabeledDataset, compute_bounds
from .operators import (
    derive_seed,
    polynomial_mutation,
    sbx_crossover,
    tournament_pick,
)


@dataclass
class BilevelConfig:
    """Hyperparameters for open-loop induction; defaults follow the
    published tuning of both genetic levels."""

    tau_impurity: float = 0.05
    max_terms: int = 3
    max_depth: int = 6
    min_node_size: int = 10
    # upper level: integer-gene GA over (B, m)
    upper_pop: int = 40
    upper_max_gen: int = 100
    upper_stall_gens: int = 5
    upper_stall_tol: float = 1e-4  # relative change considered "no progress"
    upper_crossover_prob: float = 0.9
    upper_mutation_prob: float | None = None  # default 1 / (max_terms * d)
    modulus_flip_prob: float = 0.1
    # lower level: coefficient solver choice and tuning
    lower_solver: str = "local"  # "local" (derivative-based) or "rga"
    rga_pop: int = 50
    rga_max_gen: int = 50
    rga_stall_gens: int = 5
    rga_stall_tol: float = 1e-4
    rga_crossover_prob: float = 0.9
    rga_eta_c: float = 15.0
    rga_eta_m: float = 20.0
    local_restarts: int = 1
    local_max_iter: int = 10
    smoothing: float = 0.1
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.tau_impurity <= 1.0:
            raise ValueError("tau_impurity must lie in (0, 1]")
        if min(self.upper_pop, self.rga_pop) < 2:
            raise ValueError("population must hold at least two individuals")
        if self.max_terms < 1:
            raise ValueError("need at least one power-law term")
        if self.jobs < 1:
            raise ValueError("jobs must be positive")


def gini(counts: Sequence[float]) -> float:
    """Gini impurity 1 - sum((n_i / N)^2); an empty node scores 0."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n <= 0:
        return 0.0
    p = counts / n
    return float(1.0 - p @ p)


def net_impurity_from_f(f: np.ndarray, y: np.ndarray, n_actions: int) -> float:
    """Size-weighted child impurity of the partition f <= 0 vs f > 0.

    A degenerate split that sends every point one way scores the parent's
    own Gini (the empty child contributes nothing).
    """
    left = f <= 0.0
    n = len(y)
    cl = np.bincount(y[left], minlength=n_actions).astype(float)
    call = np.bincount(y, minlength=n_actions).astype(float)
    cr = call - cl
    nl = cl.sum()
    nr = n - nl
    total = 0.0
    if nl > 0:
        total += nl - (cl @ cl) / nl
    if nr > 0:
        total += nr - (cr @ cr) / nr
    return float(total / n)


def net_impurity(rule: SplitRule, xh: np.ndarray, y: np.ndarray, n_actions: int) -> float:
    """F_L of one rule on a node's normalized states and labels."""
    return net_impurity_from_f(eval_rule_batch(rule, xh), y, n_actions)


def _term_matrix(xh: np.ndarray, exponents: Sequence[Sequence[int]]) -> np.ndarray:
    """Power-law features z_i = prod_j xh_j^b_ij as an (n, p) matrix."""
    n = xh.shape[0]
    out = np.empty((n, len(exponents)))
    for i, row in enumerate(exponents):
        term = np.ones(n)
        for j, b in enumerate(row):
            if b:
                term = term * xh[:, j] ** b
        out[:, i] = term
    return out


@dataclass
class LowerResult:
    """Best coefficients the lower level found for a fixed (B, m)."""

    weights: tuple[float, ...]
    bias1: float
    bias2: float | None
    f_l: float
    history: list[float] = field(default_factory=list)


def _split_values(Z: np.ndarray, v: np.ndarray, modulus: bool) -> np.ndarray:
    p = Z.shape[1]
    f = Z @ v[:p] + v[p]
    if modulus:
        f = np.abs(f) - abs(v[p + 1])
    return f


def _exact_f_l(
    Z: np.ndarray, y: np.ndarray, n_actions: int, v: np.ndarray, modulus: bool
) -> float:
    return net_impurity_from_f(_split_values(Z, v, modulus), y, n_actions)


def _surrogate(
    v: np.ndarray,
    Z: np.ndarray,
    y_onehot: np.ndarray,
    modulus: bool,
    s: float,
) -> tuple[float, np.ndarray]:
    """Smoothed F_L and its gradient.

    Hard membership is replaced by sigmoid weights L_k = sigma(-f_k / s),
    which makes the impurity differentiable in the coefficients.
    """
    n, p = Z.shape
    w, th1 = v[:p], v[p]
    raw = Z @ w + th1
    if modulus:
        th2 = v[p + 1]
        f = np.abs(raw) - abs(th2)
    else:
        f = raw
    L = 0.5 * (1.0 - np.tanh(0.5 * f / s))  # sigma(-f/s), overflow-safe
    cl = y_onehot.T @ L
    tot = y_onehot.sum(axis=0)
    cr = tot - cl
    nl = L.sum()
    nr = n - nl
    inv_nl = 1.0 / nl if nl > 1e-12 else 0.0
    inv_nr = 1.0 / nr if nr > 1e-12 else 0.0
    sl = cl @ cl
    sr = cr @ cr
    value = 1.0 - (sl * inv_nl + sr * inv_nr) / n

    # dF/dL_k depends only on the class of point k and the pooled sums.
    per_class = (
        2.0 * cl * inv_nl - sl * inv_nl * inv_nl - 2.0 * cr * inv_nr + sr * inv_nr * inv_nr
    )
    dF_dL = -(y_onehot @ per_class) / n
    dL_df = -L * (1.0 - L) / s
    g_f = dF_dL * dL_df
    if modulus:
        g_raw = g_f * np.sign(raw)
        grad = np.empty(p + 2)
        grad[p + 1] = -math.copysign(1.0, th2) * g_f.sum()
    else:
        g_raw = g_f
        grad = np.empty(p + 1)
    grad[:p] = Z.T @ g_raw
    grad[p] = g_raw.sum()
    return float(value), grad


def _dipole_start(
    Z: np.ndarray, y: np.ndarray, modulus: bool, rng: np.random.Generator
) -> np.ndarray:
    """Hyperplane seeded from one pair of opposite-class points.

    Plain rules bisect the pair at its midpoint; modulus rules put the
    plane through one point and open the band halfway to the other, so
    the pair starts on opposite sides in both forms.
    """
    classes = np.unique(y)
    picked = rng.choice(len(classes), size=2, replace=False)
    a_cls, b_cls = classes[picked[0]], classes[picked[1]]
    za = Z[rng.choice(np.flatnonzero(y == a_cls))]
    zb = Z[rng.choice(np.flatnonzero(y == b_cls))]
    w = za - zb
    if not np.any(w):
        w = rng.uniform(-1.0, 1.0, Z.shape[1])
    if modulus:
        th1 = -float(w @ zb)
        th2 = 0.5 * abs(float(w @ za) + th1)
        if th2 == 0.0:
            th2 = 0.5
        v = np.concatenate([w, [th1, th2]])
    else:
        th1 = -float(w @ (za + zb)) / 2.0
        v = np.concatenate([w, [th1]])
    scale = np.max(np.abs(v))
    if scale > 1.0:
        v /= scale
    return v


def _best_threshold(
    vals: np.ndarray,
    y: np.ndarray,
    n_actions: int,
    extra_right: np.ndarray | None = None,
) -> tuple[float, float] | None:
    """Exact impurity-minimizing cut c for the 1-D partition vals <= c.

    Sorting once makes every candidate cut's impurity available from
    prefix counts, so the offset coefficient can be placed optimally
    instead of relying on the smoothed surrogate's view of it.

    `extra_right` pins additional class counts to the > c side; band
    refinement uses it to sweep one band edge while points beyond the
    other edge stay outside the partition.
    """
    n = len(y)
    order = np.argsort(vals)
    v = vals[order]
    if n_actions == 2:
        c1 = np.cumsum(y[order], dtype=float)
        nl = np.arange(1, n + 1, dtype=float)
        t1, t0 = c1[-1], n - c1[-1]
        n_all = float(n)
        if extra_right is not None:
            t0 += float(extra_right[0])
            t1 += float(extra_right[1])
            n_all += float(extra_right.sum())
        c0 = nl - c1
        sl = c0 * c0 + c1 * c1
        sr = (t0 - c0) ** 2 + (t1 - c1) ** 2
    else:
        onehot = np.zeros((n, n_actions))
        onehot[np.arange(n), y[order]] = 1.0
        prefix = np.cumsum(onehot, axis=0)
        total = prefix[-1]
        n_all = float(n)
        if extra_right is not None:
            total = total + extra_right
            n_all += float(extra_right.sum())
        nl = np.arange(1, n + 1, dtype=float)
        sl = (prefix * prefix).sum(axis=1)
        sr = ((total - prefix) ** 2).sum(axis=1)
    nr = n_all - nl
    with np.errstate(divide="ignore", invalid="ignore"):
        f_l = 1.0 - (sl / nl + np.where(nr > 0, sr / nr, 0.0)) / n_all
    candidates = np.flatnonzero(v[:-1] < v[1:])  # cuts between distinct values
    if len(candidates) == 0:
        return None
    k = candidates[np.argmin(f_l[candidates])]
    return 0.5 * (v[k] + v[k + 1]), float(f_l[k])


def _best_interval(
    a: np.ndarray,
    b: np.ndarray,
    y: np.ndarray,
    n_actions: int,
) -> tuple[float, float] | None:
    """Exact impurity-minimizing scalar t for the partition
    "sample i is left iff a_i <= t <= b_i".

    Walking t across the sorted interval endpoints toggles one sample's
    membership at a time, so class counts on both sides follow from a
    cumulative sum over the event sequence.  Band rules reduce each
    weight to this form: with the other coefficients fixed, f <= 0 is an
    interval condition on the remaining weight.
    """
    n = len(y)
    pos = np.concatenate([a, b])
    onehot = np.zeros((2 * n, n_actions))
    onehot[np.arange(n), y] = 1.0
    onehot[np.arange(n, 2 * n), y] = -1.0
    order = np.argsort(pos)
    pos = pos[order]
    cin = np.cumsum(onehot[order], axis=0)
    # Candidates sit strictly between distinct event positions, where the
    # membership state is settled regardless of tie order.
    valid = np.flatnonzero(pos[:-1] < pos[1:])
    if len(valid) == 0:
        return None
    total = np.bincount(y, minlength=n_actions).astype(float)
    c_in = cin[valid]
    nl = c_in.sum(axis=1)
    nr = n - nl
    sl = (c_in * c_in).sum(axis=1)
    sr = ((total - c_in) ** 2).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f_l = 1.0 - (
            np.where(nl > 0, sl / nl, 0.0) + np.where(nr > 0, sr / nr, 0.0)
        ) / n
    k = int(np.argmin(f_l))
    k_best = valid[k]
    return 0.5 * (pos[k_best] + pos[k_best + 1]), float(f_l[k])


def _best_band_exact(
    raw: np.ndarray, y: np.ndarray, n_actions: int
) -> tuple[float, float, float] | None:
    """Globally optimal band [lo, hi] (inside -> left) by scoring every
    pair of cut positions; quadratic, so only used on small nodes."""
    n = len(y)
    order = np.argsort(raw)
    r = raw[order]
    onehot = np.zeros((n, n_actions))
    onehot[np.arange(n), y[order]] = 1.0
    prefix = np.vstack([np.zeros(n_actions), np.cumsum(onehot, axis=0)])
    total = prefix[-1]
    # Edges sit in gaps between distinct values (or outside the data).
    starts = np.flatnonzero(np.concatenate([[True], r[1:] > r[:-1]]))
    ends = np.flatnonzero(np.concatenate([r[1:] > r[:-1], [True]]))
    best: tuple[float, float, float] | None = None
    for i in starts:
        j = ends[ends >= i]
        cin = prefix[j + 1] - prefix[i]
        nl = (j + 1 - i).astype(float)
        nr = n - nl
        sl = (cin * cin).sum(axis=1)
        sr = ((total - cin) ** 2).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            f_l = 1.0 - (sl / nl + np.where(nr > 0, sr / nr, 0.0)) / n
        k = int(np.argmin(f_l))
        if best is None or f_l[k] < best[2]:
            jk = j[k]
            lo = r[i] - 1.0 if i == 0 else 0.5 * (r[i - 1] + r[i])
            hi = r[jk] + 1.0 if jk == n - 1 else 0.5 * (r[jk] + r[jk + 1])
            best = (float(lo), float(hi), float(f_l[k]))
    return best


def _band_edges(
    raw: np.ndarray,
    y: np.ndarray,
    n_actions: int,
    lo: float,
    rounds: int = 2,
) -> tuple[float, float, float] | None:
    """Refine a band [lo, hi] (inside -> left) by exact edge sweeps.

    Alternates the two edges, each placed optimally given the other, so
    a band-shaped class structure is recovered without the slow zigzag
    a width/center parameterization suffers on correlated axes.
    """
    best: tuple[float, float, float] | None = None
    hi = math.inf
    for _ in range(rounds):
        inside = raw >= lo
        if not inside.any():
            break
        found = _best_threshold(
            raw[inside],
            y[inside],
            n_actions,
            extra_right=np.bincount(y[~inside], minlength=n_actions),
        )
        if found is None:
            break
        hi = found[0]
        best = (lo, hi, found[1])
        inside = raw <= hi
        found = _best_threshold(
            -raw[inside],
            y[inside],
            n_actions,
            extra_right=np.bincount(y[~inside], minlength=n_actions),
        )
        if found is None:
            break
        lo = -found[0]
        best = (lo, hi, found[1])
    return best


def _rescaled(v: np.ndarray) -> np.ndarray:
    """Shrink a coefficient vector into the box; the rule's sign is
    invariant under positive scaling of all coefficients at once."""
    scale = np.max(np.abs(v))
    return v / scale if scale > 1.0 else v


def _coord_descent_plain(
    Z: np.ndarray, y: np.ndarray, n_actions: int, v: np.ndarray, rounds: int = 2
) -> np.ndarray:
    """Exact cyclic coordinate sweeps for a plain rule's coefficients.

    Term values are strictly positive (powers of features that are at
    least 1), so with the others held fixed each weight partitions the
    data by a single threshold on -r_i / Z_ij, and the same sweep that
    places the offset places every weight optimally in turn.
    """
    p = Z.shape[1]
    v = v.copy()
    for _ in range(rounds):
        for j in range(p):
            r = Z @ v[:p] - Z[:, j] * v[j] + v[p]
            found = _best_threshold(r / Z[:, j], y, n_actions)
            if found is not None:
                v[j] = -found[0]
        found = _best_threshold(Z @ v[:p], y, n_actions)
        if found is not None:
            v[p] = -found[0]
    return v


def _coord_descent_band(
    Z: np.ndarray, y: np.ndarray, n_actions: int, v: np.ndarray, rounds: int = 2
) -> np.ndarray:
    """Exact cyclic coordinate sweeps for a band rule's coefficients.

    With the other coefficients fixed, |f| - theta2 <= 0 holds exactly
    when weight j lies in a per-sample interval, so each weight is
    placed by the interval sweep; the two band edges then move by
    threshold sweeps on the updated direction.
    """
    p = Z.shape[1]
    v = v.copy()
    for _ in range(rounds):
        th1, th2 = v[p], abs(v[p + 1])
        for j in range(p):
            r = Z @ v[:p] - Z[:, j] * v[j] + th1
            found = _best_interval(
                (-th2 - r) / Z[:, j], (th2 - r) / Z[:, j], y, n_actions
            )
            if found is not None:
                v[j] = found[0]
        raw = Z @ v[:p]
        got = _band_edges(raw, y, n_actions, -v[p] - th2, rounds=1)
        if got is not None:
            lo, hi = got[0], got[1]
            v[p] = -0.5 * (lo + hi)
            v[p + 1] = 0.5 * (hi - lo)
    return v


def _mean_gap_start(
    Z: np.ndarray, y: np.ndarray, modulus: bool
) -> np.ndarray | None:
    """Deterministic start aimed along the gap between the two largest
    classes' term-space means."""
    counts = np.bincount(y)
    top = np.argsort(counts)[::-1]
    if len(top) < 2 or counts[top[1]] == 0:
        return None
    mu_a = Z[y == top[0]].mean(axis=0)
    mu_b = Z[y == top[1]].mean(axis=0)
    w = mu_a - mu_b
    if not np.any(w):
        return None
    th1 = -float(w @ (mu_a + mu_b)) / 2.0
    tail = [th1, 0.5 * abs(float(w @ (mu_a - mu_b)))] if modulus else [th1]
    return _rescaled(np.concatenate([w, tail]))


def _variance_contrast_starts(Z: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    """Band-direction seeds from the generalized eigenvector contrasting
    the two largest classes' covariances.

    Points inside a band vary little along its normal and points outside
    vary a lot, so the direction maximizing one class's variance against
    the other's is a strong band-normal guess even when both classes
    share a mean and every mean-based start is blind.  Both variance
    ratios are tried since either class may be the band interior; the
    offsets are placeholders for the edge sweeps downstream.
    """
    p = Z.shape[1]
    counts = np.bincount(y)
    top = np.argsort(counts)[::-1]
    if p < 2 or len(top) < 2 or counts[top[1]] < 2 or counts[top[0]] < 2:
        return []
    jitter = 1e-9 * np.eye(p)
    ca = np.cov(Z[y == top[0]].T) + jitter
    cb = np.cov(Z[y == top[1]].T) + jitter
    out = []
    for sa, sb in ((ca, cb), (cb, ca)):
        try:
            _, vecs = eigh(sa, sb)
        except np.linalg.LinAlgError:
            continue
        w = vecs[:, -1]
        if np.any(w) and np.all(np.isfinite(w)):
            out.append(np.concatenate([w, [0.0, 0.25]]))
    return out


def _logistic_direction(
    Z: np.ndarray, y: np.ndarray, modulus: bool, maxiter: int = 40
) -> np.ndarray | None:
    """Hyperplane direction from a logistic fit of the two largest classes.

    Unlike the smoothed impurity, the logistic loss is convex in
    (w, theta1), so the fitted direction does not depend on the starting
    point; on separable data it aligns with a separating plane.  The fit
    runs unconstrained: the partition is invariant to positive scaling,
    so the fitted vector is rescaled into the box afterwards, and boxing
    the fit itself would bias it toward large-margin-on-average planes
    instead of separating ones.  The direction is only a candidate,
    downstream sweeps place the offsets and the hard partition decides.
    """
    counts = np.bincount(y)
    top = np.argsort(counts)[::-1]
    if len(top) < 2 or counts[top[1]] == 0:
        return None
    mask = (y == top[0]) | (y == top[1])
    Zs = Z[mask]
    sign = np.where(y[mask] == top[0], 1.0, -1.0)
    n, p = Zs.shape

    def nll(v: np.ndarray) -> tuple[float, np.ndarray]:
        m = -sign * (Zs @ v[:p] + v[p])
        value = np.logaddexp(0.0, m).mean()
        g = -sign * 0.5 * (1.0 + np.tanh(0.5 * m))  # -sign * sigma(m)
        grad = np.empty(p + 1)
        grad[:p] = Zs.T @ g / n
        grad[p] = g.mean()
        return float(value), grad

    res = minimize(
        nll,
        np.zeros(p + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": maxiter},
    )
    v = res.x
    if not np.any(v[:p]) or not np.all(np.isfinite(v)):
        return None
    if modulus:
        v = np.concatenate([v, [0.25 * np.max(np.abs(v))]])
    return _rescaled(v)


_DIRECTION_SAMPLE = 1024
_SWEEP_SAMPLE = 4096


def _lower_solve_local(
    Z: np.ndarray,
    y: np.ndarray,
    n_actions: int,
    modulus: bool,
    cfg: BilevelConfig,
    rng: np.random.Generator,
) -> LowerResult:
    p = Z.shape[1]
    dim = p + 1 + (1 if modulus else 0)
    best_v: np.ndarray | None = None
    best_f = math.inf

    def consider(v: np.ndarray) -> None:
        nonlocal best_v, best_f
        f = _exact_f_l(Z, y, n_actions, v, modulus)
        if f < best_f:
            best_f, best_v = f, v.copy()

    # Directions transfer from a subsample, and the exploratory sweeps
    # run on a larger one; the one full-data polish at the end and the
    # scoring of every kept candidate use all points.
    if len(y) > _DIRECTION_SAMPLE:
        sub = rng.choice(len(y), size=_DIRECTION_SAMPLE, replace=False)
        Z_dir, y_dir = Z[sub], y[sub]
    else:
        Z_dir, y_dir = Z, y
    if len(y) > _SWEEP_SAMPLE:
        sub = rng.choice(len(y), size=_SWEEP_SAMPLE, replace=False)
        Z_sw, y_sw = Z[sub], y[sub]
    else:
        Z_sw, y_sw = Z, y
    y_onehot = np.zeros((len(y_dir), n_actions))
    y_onehot[np.arange(len(y_dir)), y_dir] = 1.0

    for _ in range(max(1, cfg.local_restarts)):
        v0 = _dipole_start(Z_dir, y_dir, modulus, rng)
        res = minimize(
            _surrogate,
            v0,
            args=(Z_dir, y_onehot, modulus, cfg.smoothing),
            jac=True,
            method="SLSQP",
            bounds=[(-1.0, 1.0)] * dim,
            options={"maxiter": cfg.local_max_iter, "ftol": 1e-8},
        )
        # Candidates are scored on the exact hard partition, never the
        # surrogate; sweeps re-place coefficients along the directions
        # the optimizer and the seeds propose.
        consider(v0)
        consider(res.x)
        seeds = [res.x]
        gap = _mean_gap_start(Z_sw, y_sw, modulus)
        if gap is not None:
            seeds.append(gap)
        if modulus:
            seeds.extend(_variance_contrast_starts(Z_dir, y_dir))
        else:
            # Bands are never linearly separable, so the logistic view
            # only informs plain rules.
            logit = _logistic_direction(Z_dir, y_dir, modulus)
            if logit is not None:
                seeds.append(logit)

        trial_best: np.ndarray | None = None
        trial_f = math.inf

        def trial(v: np.ndarray) -> None:
            nonlocal trial_best, trial_f
            f = _exact_f_l(Z_sw, y_sw, n_actions, v, modulus)
            if f < trial_f:
                trial_f, trial_best = f, v

        if not modulus:
            for v in seeds:
                # Descent's final step places the offset exactly.
                trial(_coord_descent_plain(Z_sw, y_sw, n_actions, v, rounds=1))
            if trial_best is not None:
                consider(
                    _rescaled(
                        _coord_descent_plain(Z, y, n_actions, trial_best, rounds=1)
                    )
                )
            continue
        placements: list[tuple[float, np.ndarray]] = []
        for v in seeds:
            # Exact band placement along the chosen direction: start the
            # lower edge below the data and let the edge sweeps settle.
            w = v[:p]
            raw = Z_sw @ w
            if len(y_sw) <= 256:
                # Small enough to score every band; descent can then stop
                # worrying about multimodal class layouts.
                got = _best_band_exact(raw, y_sw, n_actions)
            else:
                got = _band_edges(
                    raw, y_sw, n_actions, float(raw.min()) - 1.0, rounds=1
                )
            if got is None:
                continue
            lo_b, hi_b, _ = got
            vb = np.concatenate([w, [-0.5 * (lo_b + hi_b), 0.5 * (hi_b - lo_b)]])
            placements.append(
                (_exact_f_l(Z_sw, y_sw, n_actions, vb, modulus), vb)
            )
        # The placement ranking is a poor guide to what the weight sweeps
        # can still recover, so descend a few leaders, not just one.
        placements.sort(key=lambda t: t[0])
        for fb, vb in placements[:2]:
            trial(vb)
            if p > 1:
                # A slightly rotated direction leaves the projected band
                # smeared; rotate it out with exact weight sweeps.  The
                # sweeps run on the small subsample; the trial scoring on
                # the larger one keeps overfitted rotations from winning.
                trial(_coord_descent_band(Z_dir, y_dir, n_actions, vb, rounds=1))
        if trial_best is not None and p > 1:
            # One more sweep cycle for whichever candidate won; cheaper
            # than giving every placement a second round.
            trial(
                _coord_descent_band(Z_dir, y_dir, n_actions, trial_best, rounds=1)
            )
        if trial_best is not None:
            # Full-data polish moves only the edges; the direction is
            # settled and full interval sweeps would dominate the cost.
            consider(_rescaled(trial_best))
            raw = Z @ trial_best[:p]
            lo0 = -trial_best[p] - abs(trial_best[p + 1])
            got = _band_edges(raw, y, n_actions, lo0, rounds=1)
            if got is not None:
                lo_b, hi_b, _ = got
                consider(
                    _rescaled(
                        np.concatenate(
                            [
                                trial_best[:p],
                                [-0.5 * (lo_b + hi_b), 0.5 * (hi_b - lo_b)],
                            ]
                        )
                    )
                )

    return LowerResult(
        weights=tuple(float(x) for x in best_v[:p]),
        bias1=float(best_v[p]),
        bias2=float(best_v[p + 1]) if modulus else None,
        f_l=best_f,
    )


def _lower_solve_rga(
    Z: np.ndarray,
    y: np.ndarray,
    n_actions: int,
    modulus: bool,
    cfg: BilevelConfig,
    rng: np.random.Generator,
) -> LowerResult:
    dim = Z.shape[1] + 1 + (1 if modulus else 0)
    mut_prob = 1.0 / dim
    pop = rng.uniform(-1.0, 1.0, (cfg.rga_pop, dim))
    fit = np.array([_exact_f_l(Z, y, n_actions, v, modulus) for v in pop])
    best_i = int(fit.argmin())
    best_v, best_f = pop[best_i].copy(), float(fit[best_i])
    history = [best_f]
    stall = 0
    for _ in range(cfg.rga_max_gen):
        children = [best_v.copy()]  # elitism of one
        better = lambda i, j: fit[i] < fit[j]
        while len(children) < cfg.rga_pop:
            a = pop[tournament_pick(rng, cfg.rga_pop, better)]
            b = pop[tournament_pick(rng, cfg.rga_pop, better)]
            if rng.random() < cfg.rga_crossover_prob:
                c1, c2 = sbx_crossover(rng, a, b, cfg.rga_eta_c)
            else:
                c1, c2 = a.copy(), b.copy()
            for child in (c1, c2):
                if len(children) < cfg.rga_pop:
                    children.append(
                        polynomial_mutation(rng, child, cfg.rga_eta_m, mut_prob)
                    )
        pop = np.array(children)
        fit = np.array([_exact_f_l(Z, y, n_actions, v, modulus) for v in pop])
        gen_best = int(fit.argmin())
        if fit[gen_best] < best_f:
            best_v, best_f = pop[gen_best].copy(), float(fit[gen_best])
        prev = history[-1]
        history.append(best_f)
        rel = abs(prev - best_f) / max(abs(prev), 1e-12)
        stall = stall + 1 if rel < cfg.rga_stall_tol else 0
        if stall >= cfg.rga_stall_gens:
            break
    p = Z.shape[1]
    return LowerResult(
        weights=tuple(float(x) for x in best_v[:p]),
        bias1=float(best_v[p]),
        bias2=float(best_v[p + 1]) if modulus else None,
        f_l=best_f,
        history=history,
    )


def lower_solve(
    exponents: tuple[tuple[int, ...], ...],
    modulus: bool,
    xh: np.ndarray,
    y: np.ndarray,
    n_actions: int,
    cfg: BilevelConfig,
    seed: int,
) -> LowerResult:
    """Minimize F_L over rule coefficients for a fixed exponent matrix."""
    Z = _term_matrix(xh, exponents)
    rng = np.random.default_rng(seed)
    if cfg.lower_solver == "rga":
        return _lower_solve_rga(Z, y, n_actions, modulus, cfg, rng)
    if cfg.lower_solver == "local":
        return _lower_solve_local(Z, y, n_actions, modulus, cfg, rng)
    raise ValueError(f"unknown lower solver {cfg.lower_solver!r}")


# ---------------------------------------------------------------------------
# upper level: integer-gene GA over exponent matrices and the modulus flag


@dataclass(frozen=True)
class SplitCandidate:
    """Winning split of one node: optimized rule plus both objectives."""

    rule: SplitRule
    f_l: float
    f_u: int
    feasible: bool


def _canonical(B: np.ndarray, modulus: bool) -> tuple[tuple[tuple[int, ...], ...], bool]:
    """Active (nonzero) rows in sorted order; the dedup key for (B, m).

    Term order does not change a rule's value, so permuted duplicates
    share one lower-level solve.
    """
    rows = sorted(tuple(int(b) for b in row) for row in B if np.any(row))
    return tuple(rows), modulus


def _random_genome(rng: np.random.Generator, max_terms: int, d: int) -> np.ndarray:
    """Sparse random exponent matrix with at least one active row."""
    B = np.zeros((max_terms, d), dtype=np.int8)
    n_active = int(rng.integers(1, max_terms + 1))
    nonzero = [e for e in EXPONENT_SET if e]
    for i in rng.choice(max_terms, size=n_active, replace=False):
        k = int(rng.integers(1, min(2, d) + 1))
        for j in rng.choice(d, size=k, replace=False):
            B[i, j] = rng.choice(nonzero)
    return B


def _repair(B: np.ndarray, rng: np.random.Generator) -> None:
    if not B.any():
        nonzero = [e for e in EXPONENT_SET if e]
        B[rng.integers(B.shape[0]), rng.integers(B.shape[1])] = rng.choice(nonzero)


def _mutate_genome(
    B: np.ndarray, modulus: bool, rng: np.random.Generator, cfg: BilevelConfig, d: int
) -> tuple[np.ndarray, bool]:
    prob = cfg.upper_mutation_prob
    if prob is None:
        prob = 1.0 / (cfg.max_terms * d)
    B = B.copy()
    mask = rng.random(B.shape) < prob
    if mask.any():
        B[mask] = rng.choice(EXPONENT_SET, size=int(mask.sum()))
    if rng.random() < cfg.modulus_flip_prob:
        modulus = not modulus
    _repair(B, rng)
    return B, modulus


def _crossover_genomes(
    a: np.ndarray, am: bool, b: np.ndarray, bm: bool, rng: np.random.Generator
) -> tuple[np.ndarray, bool, np.ndarray, bool]:
    """Uniform exchange of exponent cells and possibly the modulus flags."""
    a, b = a.copy(), b.copy()
    swap = rng.random(a.shape) < 0.5
    a[swap], b[swap] = b[swap], a[swap].copy()
    if rng.random() < 0.5:
        am, bm = bm, am
    _repair(a, rng)
    _repair(b, rng)
    return a, am, b, bm


def _dominance_key(f_u: int, f_l: float, feasible: bool) -> tuple:
    """Feasibility-first ordering: any feasible candidate beats any
    infeasible one; feasibles compare on F_U, infeasibles on F_L."""
    if feasible:
        return (0, f_u, f_l)
    return (1, f_l, f_u)


# Worker-process state for parallel lower-level solves.
_LOWER_CTX: dict = {}


def _init_lower_worker(xh, y, n_actions, cfg) -> None:
    _LOWER_CTX.update(xh=xh, y=y, n_actions=n_actions, cfg=cfg)


def _lower_task(task) -> LowerResult:
    exponents, modulus, seed = task
    return lower_solve(
        exponents,
        modulus,
        _LOWER_CTX["xh"],
        _LOWER_CTX["y"],
        _LOWER_CTX["n_actions"],
        _LOWER_CTX["cfg"],
        seed,
    )


def upper_search(
    xh: np.ndarray,
    y: np.ndarray,
    n_actions: int,
    cfg: BilevelConfig,
    seed: int,
    trace: list | None = None,
) -> SplitCandidate:
    """Search (B, m) for the simplest rule whose tuned F_L is feasible.

    Returns the best candidate under the feasibility-first ordering; if
    any feasible individual was ever evaluated, the result is feasible.
    `trace`, when given, receives one (f_u, f_l, feasible) triple per
    generation describing the best individual found so far.

    Lower-level solves are independent across individuals; with
    cfg.jobs > 1 they run in a process pool, seeded per exponent matrix
    so parallel and serial runs return identical results.
    """
    d = xh.shape[1]
    rng = np.random.default_rng(seed)
    _init_lower_worker(xh, y, n_actions, cfg)
    pool = None
    run_map: Callable[[Callable, list], Iterable] = lambda f, it: map(f, it)
    if cfg.jobs > 1:
        pool = get_context("fork").Pool(
            cfg.jobs, initializer=_init_lower_worker, initargs=(xh, y, n_actions, cfg)
        )
        run_map = pool.map

    cache: dict = {}

    def evaluate(genomes: list[tuple[np.ndarray, bool]]) -> list[tuple]:
        keys = [_canonical(B, m) for B, m in genomes]
        missing = [k for k in dict.fromkeys(keys) if k not in cache]
        tasks = [(k[0], k[1], derive_seed(cfg.seed, k)) for k in missing]
        for k, result in zip(missing, run_map(_lower_task, tasks)):
            cache[k] = result
        out = []
        for key in keys:
            res = cache[key]
            f_u = sum(1 for row in key[0] for b in row if b)
            out.append((key, res, f_u))
        return out

    try:
        # Initial population: every single-term rule template, then random fill.
        genomes: list[tuple[np.ndarray, bool]] = []
        singles = [(j, e) for j in range(d) for e in EXPONENT_SET if e]
        if len(singles) > cfg.upper_pop:
            picks = rng.choice(len(singles), size=cfg.upper_pop, replace=False)
            singles = [singles[i] for i in picks]
        for j, e in singles:
            B = np.zeros((cfg.max_terms, d), dtype=np.int8)
            B[0, j] = e
            genomes.append((B, bool(rng.random() < 0.5)))
        while len(genomes) < cfg.upper_pop:
            genomes.append(
                (_random_genome(rng, cfg.max_terms, d), bool(rng.random() < 0.5))
            )
        genomes = genomes[: cfg.upper_pop]

        evals = evaluate(genomes)

        def key_of(i: int) -> tuple:
            _, res, f_u = evals[i]
            return _dominance_key(f_u, res.f_l, res.f_l <= cfg.tau_impurity)

        best = min(evals, key=lambda e: _dominance_key(e[2], e[1].f_l, e[1].f_l <= cfg.tau_impurity))
        best_key = _dominance_key(best[2], best[1].f_l, best[1].f_l <= cfg.tau_impurity)

        stall = 0
        for _ in range(cfg.upper_max_gen):
            if trace is not None:
                trace.append((best[2], best[1].f_l, best_key[0] == 0))
            better = lambda i, j: key_of(i) < key_of(j)
            elite = min(range(len(genomes)), key=key_of)
            children = [genomes[elite]]
            while len(children) < cfg.upper_pop:
                ga, ma = genomes[tournament_pick(rng, len(genomes), better)]
                gb, mb = genomes[tournament_pick(rng, len(genomes), better)]
                if rng.random() < cfg.upper_crossover_prob:
                    ga, ma, gb, mb = _crossover_genomes(ga, ma, gb, mb, rng)
                for g, m in ((ga, ma), (gb, mb)):
                    if len(children) < cfg.upper_pop:
                        children.append(_mutate_genome(g, m, rng, cfg, d))
            genomes = children
            evals = evaluate(genomes)

            prev_key = best_key
            gen_best = min(
                evals,
                key=lambda e: _dominance_key(e[2], e[1].f_l, e[1].f_l <= cfg.tau_impurity),
            )
            gen_key = _dominance_key(
                gen_best[2], gen_best[1].f_l, gen_best[1].f_l <= cfg.tau_impurity
            )
            if gen_key < best_key:
                best, best_key = gen_best, gen_key
            if prev_key[0] != best_key[0]:
                stall = 0  # crossed into feasibility: real progress
            else:
                rel = abs(prev_key[1] - best_key[1]) / max(abs(prev_key[1]), 1e-12)
                stall = stall + 1 if rel < cfg.upper_stall_tol else 0
            if stall >= cfg.upper_stall_gens:
                break
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    key, res, f_u = best
    rule = SplitRule(
        exponents=key[0],
        weights=res.weights,
        bias1=res.bias1,
        bias2=res.bias2,
        modulus=key[1],
    )
    return SplitCandidate(
        rule=rule, f_l=res.f_l, f_u=f_u, feasible=res.f_l <= cfg.tau_impurity
    )


@dataclass
class SplitStats:
    """Per-node record kept for the training manifest."""

    path: str
    n_points: int
    parent_gini: float
    f_u: int | None
    f_l: float | None
    feasible: bool | None
    wall_time_s: float
    kind: str  # "split" or "leaf"


def induce_tree(
    train: LabeledDataset,
    cfg: BilevelConfig,
    stats: list[SplitStats] | None = None,
) -> Nldt:
    """Grow a tree on `train`; normalization bounds come from `train` itself.

    A node becomes a leaf when its Gini is already within `tau_impurity`,
    at `max_depth`, below `min_node_size`, or when the best candidate rule
    fails to reduce impurity.
    """
    if len(train) < 2:
        raise ValueError("need at least two training points")
    if len(np.unique(train.actions)) < 2:
        raise ValueError("training data holds a single action class")
    bounds = compute_bounds(train)
    xh_all = normalize_batch(train.states, bounds)
    y_all = train.actions
    n_actions = train.n_actions

    def build(idx: np.ndarray, depth: int, path: str) -> NldtNode:
        counts = np.bincount(y_all[idx], minlength=n_actions)
        parent_gini = gini(counts)
        if (
            parent_gini <= cfg.tau_impurity
            or depth >= cfg.max_depth
            or len(idx) < cfg.min_node_size
        ):
            if stats is not None:
                stats.append(
                    SplitStats(path, len(idx), parent_gini, None, None, None, 0.0, "leaf")
                )
            return Leaf.from_counts(counts)
        t0 = time.perf_counter()
        cand = upper_search(
            xh_all[idx], y_all[idx], n_actions, cfg, derive_seed(cfg.seed, ("node", path))
        )
        elapsed = time.perf_counter() - t0
        f = eval_rule_batch(cand.rule, xh_all[idx])
        left = f <= 0.0
        make_leaf = cand.f_l >= parent_gini - 1e-12 or not left.any() or left.all()
        if stats is not None:
            stats.append(
                SplitStats(
                    path, len(idx), parent_gini, cand.f_u, cand.f_l,
                    cand.feasible, elapsed, "leaf" if make_leaf else "split",
                )
            )
        if make_leaf:
            return Leaf.from_counts(counts)
        return Conditional(
            cand.rule,
            build(idx[left], depth + 1, path + "L"),
            build(idx[~left], depth + 1, path + "R"),
        )

    root = build(np.arange(len(train)), 0, "")
    return Nldt(root, bounds, n_actions)


def prune(tree: Nldt, validation: LabeledDataset, tolerance: float = 0.25) -> Nldt:
    """Bottom-up reduced-error pruning on held-out data.

    Each conditional collapses to its majority leaf whenever that costs at
    most `tolerance` percentage points of whole-tree validation accuracy;
    passes repeat until a fixpoint.
    """
    if len(validation) == 0:
        raise ValueError("validation set is empty")

    def accuracy(t: Nldt) -> float:
        return 100.0 * float(
            (predict_batch(t, validation.states) == validation.actions).mean()
        )

    def replace_at(node: NldtNode, path: str) -> NldtNode:
        if not path:
            return Leaf.from_counts(node.class_counts)
        child = replace_at(node.left if path[0] == "L" else node.right, path[1:])
        if path[0] == "L":
            return Conditional(node.rule, child, node.right)
        return Conditional(node.rule, node.left, child)

    current = tree
    base = accuracy(current)
    changed = True
    while changed:
        changed = False
        paths = [p for p, n in iter_nodes(current) if isinstance(n, Conditional)]
        for path in sorted(paths, key=len, reverse=True):
            candidate = Nldt(
                replace_at(current.root, path), current.bounds, current.n_actions
            )
            acc = accuracy(candidate)
            if base - acc <= tolerance:
                current = candidate
                base = acc
                changed = True
                break  # structure changed; rebuild the path list
    return current
