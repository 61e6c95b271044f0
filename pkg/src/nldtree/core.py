"""Core data model for nonlinear decision trees over normalized features.

A tree routes a raw state vector x through conditional nodes to a leaf
holding a discrete action.  Every conditional node tests a split rule

    f(xh) = sum_i w_i * B_i(xh) + theta1                    (modulus off)
    f(xh) = |sum_i w_i * B_i(xh) + theta1| - |theta2|       (modulus on)

where each B_i(xh) = prod_j xh_j ** b_ij is a power law with integer
exponents b_ij drawn from EXPONENT_SET, and xh is the feature vector
normalized so that training minimum maps to 1 and maximum maps to 2.
Routing sends f <= 0 to the left child and f > 0 to the right child.

Trees and rules are immutable; all tree transformations return new trees.
"""

from __future__ import annotations

import json
import math
from dataclasses import InitVar, dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

EXPONENT_SET = (-3, -2, -1, 0, 1, 2, 3)

COEFF_MIN = -1.0
COEFF_MAX = 1.0


class DomainError(ValueError):
    """A rule hit an undefined value, e.g. 0 raised to a negative power."""


@dataclass(frozen=True)
class NormalizationBounds:
    """Per-feature training ranges used to map raw states onto [1, 2]."""

    x_min: tuple[float, ...]
    x_max: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.x_min) != len(self.x_max):
            raise ValueError("x_min and x_max lengths differ")
        if not self.x_min:
            raise ValueError("bounds need at least one feature")
        for j, (lo, hi) in enumerate(zip(self.x_min, self.x_max)):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"feature {j}: bounds must be finite")
            if not lo < hi:
                raise ValueError(f"feature {j}: min {lo!r} is not below max {hi!r}")

    @property
    def d(self) -> int:
        return len(self.x_min)


def normalize(x: Sequence[float], bounds: NormalizationBounds) -> list[float]:
    """Map a raw state to normalized features xh_j = 1 + (x_j - min_j) / range_j.

    In-bounds values land in [1, 2]; out-of-bounds values extrapolate
    linearly, they are never clamped.
    """
    if len(x) != bounds.d:
        raise ValueError(f"state has {len(x)} features, bounds expect {bounds.d}")
    mn, mx = bounds.x_min, bounds.x_max
    return [1.0 + (x[j] - mn[j]) / (mx[j] - mn[j]) for j in range(bounds.d)]


def normalize_batch(states: np.ndarray, bounds: NormalizationBounds) -> np.ndarray:
    """Vectorized `normalize` for an (n, d) array of raw states."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != bounds.d:
        raise ValueError(f"expected (n, {bounds.d}) state array, got {states.shape}")
    mn = np.array(bounds.x_min)
    mx = np.array(bounds.x_max)
    return 1.0 + (states - mn) / (mx - mn)


@dataclass(frozen=True)
class SplitRule:
    """One conditional node's test.

    `exponents` is a (p, d) integer matrix; row i defines the power law
    B_i.  `weights` holds one coefficient per row.  `bias2` is present
    exactly when `modulus` is set.  Coefficients live in [-1, 1]; pass
    check_box=False to admit externally published rules that break that
    box while keeping the structural checks.
    """

    exponents: tuple[tuple[int, ...], ...]
    weights: tuple[float, ...]
    bias1: float
    bias2: float | None = None
    modulus: bool = False
    check_box: InitVar[bool] = True

    def __post_init__(self, check_box: bool) -> None:
        p = len(self.exponents)
        if p == 0:
            raise ValueError("rule needs at least one power-law term")
        d = len(self.exponents[0])
        if d == 0:
            raise ValueError("rule needs at least one feature")
        for i, row in enumerate(self.exponents):
            if len(row) != d:
                raise ValueError(f"term {i}: expected {d} exponents, got {len(row)}")
            if not all(isinstance(b, int) and b in EXPONENT_SET for b in row):
                raise ValueError(f"term {i}: exponents must come from {EXPONENT_SET}")
            if not any(row):
                raise ValueError(f"term {i}: all exponents are zero")
        if len(self.weights) != p:
            raise ValueError(f"expected {p} weights, got {len(self.weights)}")
        if self.modulus != (self.bias2 is not None):
            raise ValueError("bias2 must be present exactly when modulus is set")
        for name, value in self._coefficients():
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
            if check_box and not COEFF_MIN <= value <= COEFF_MAX:
                raise ValueError(f"{name} = {value!r} outside [-1, 1]")

    def _coefficients(self) -> list[tuple[str, float]]:
        named = [(f"weight {i}", w) for i, w in enumerate(self.weights)]
        named.append(("bias1", self.bias1))
        if self.bias2 is not None:
            named.append(("bias2", self.bias2))
        return named

    @property
    def n_terms(self) -> int:
        return len(self.exponents)

    @property
    def d(self) -> int:
        return len(self.exponents[0])

    @property
    def n_coefficients(self) -> int:
        """Weights plus biases, the slice this rule occupies in a flat vector."""
        return self.n_terms + 1 + (1 if self.modulus else 0)


def rule_complexity(rule: SplitRule) -> int:
    """Number of nonzero exponents, the upper-level objective for one rule."""
    return sum(1 for row in rule.exponents for b in row if b)


def eval_rule(rule: SplitRule, xh: Sequence[float]) -> float:
    """Evaluate a rule on one normalized feature vector."""
    if len(xh) != rule.d:
        raise ValueError(f"rule expects {rule.d} features, got {len(xh)}")
    acc = rule.bias1
    for row, w in zip(rule.exponents, rule.weights):
        term = w
        for j, b in enumerate(row):
            if b:
                xj = xh[j]
                if xj == 0.0 and b < 0:
                    raise DomainError(
                        f"feature {j} normalized to 0 under a negative exponent"
                    )
                term *= xj**b
        acc += term
    if rule.modulus:
        acc = abs(acc) - abs(rule.bias2)
    return acc


def rule_terms_batch(rule: SplitRule, xh: np.ndarray) -> np.ndarray:
    """Power-law term matrix B for an (n, d) block of normalized states."""
    xh = np.asarray(xh, dtype=float)
    n = xh.shape[0]
    out = np.empty((n, rule.n_terms))
    for i, row in enumerate(rule.exponents):
        term = np.ones(n)
        for j, b in enumerate(row):
            if b:
                col = xh[:, j]
                if b < 0 and np.any(col == 0.0):
                    raise DomainError(
                        f"feature {j} normalized to 0 under a negative exponent"
                    )
                term = term * col**b
        out[:, i] = term
    return out


def eval_rule_batch(rule: SplitRule, xh: np.ndarray) -> np.ndarray:
    """Vectorized `eval_rule` over an (n, d) block of normalized states."""
    f = rule_terms_batch(rule, xh) @ np.array(rule.weights) + rule.bias1
    if rule.modulus:
        f = np.abs(f) - abs(rule.bias2)
    return f


def _argmax_lowest(counts: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(counts)):
        if counts[i] > counts[best]:
            best = i
    return best


@dataclass(frozen=True)
class Leaf:
    """Terminal node emitting one action; counts record class support."""

    action: int
    class_counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.class_counts:
            raise ValueError("leaf needs class counts")
        if any(c < 0 for c in self.class_counts):
            raise ValueError("class counts must be non-negative")
        if not 0 <= self.action < len(self.class_counts):
            raise ValueError(f"action {self.action} outside class-count range")
        if any(self.class_counts) and self.action != _argmax_lowest(self.class_counts):
            raise ValueError(
                f"action {self.action} is not the majority of {self.class_counts}"
            )

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "Leaf":
        counts = tuple(int(c) for c in counts)
        return cls(_argmax_lowest(counts), counts)

    @classmethod
    def pure(cls, action: int, n_actions: int) -> "Leaf":
        """Leaf for a hand-built tree, with one-hot support at `action`."""
        counts = tuple(1 if a == action else 0 for a in range(n_actions))
        return cls(action, counts)


@dataclass(frozen=True)
class Conditional:
    """Internal node: rule routes f <= 0 left, f > 0 right."""

    rule: SplitRule
    left: "NldtNode"
    right: "NldtNode"

    @property
    def class_counts(self) -> tuple[int, ...]:
        return tuple(
            l + r for l, r in zip(self.left.class_counts, self.right.class_counts)
        )


NldtNode = Union[Leaf, Conditional]


def _node_depth(node: NldtNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(_node_depth(node.left), _node_depth(node.right))


@dataclass(frozen=True)
class Nldt:
    """A nonlinear decision tree bound to its training normalization."""

    root: NldtNode
    bounds: NormalizationBounds
    n_actions: int

    def __post_init__(self) -> None:
        if self.n_actions < 1:
            raise ValueError("need at least one action")
        for _, node in iter_nodes(self):
            if isinstance(node, Leaf):
                if len(node.class_counts) != self.n_actions:
                    raise ValueError("leaf class counts disagree with n_actions")
            else:
                if node.rule.d != self.bounds.d:
                    raise ValueError(
                        f"rule over {node.rule.d} features, bounds over {self.bounds.d}"
                    )

    @property
    def d(self) -> int:
        return self.bounds.d

    @property
    def depth(self) -> int:
        return _node_depth(self.root)

    @property
    def n_rules(self) -> int:
        return sum(1 for _, n in iter_nodes(self) if isinstance(n, Conditional))

    def rule_lengths(self) -> list[int]:
        return [
            rule_complexity(n.rule)
            for _, n in iter_nodes(self)
            if isinstance(n, Conditional)
        ]


def iter_nodes(tree: Nldt) -> Iterator[tuple[str, NldtNode]]:
    """Breadth-first (path, node) pairs; the path is a string over {L, R}."""
    queue: list[tuple[str, NldtNode]] = [("", tree.root)]
    while queue:
        path, node = queue.pop(0)
        yield path, node
        if isinstance(node, Conditional):
            queue.append((path + "L", node.left))
            queue.append((path + "R", node.right))


def predict(tree: Nldt, x: Sequence[float]) -> int:
    """Route one raw state to its action."""
    xh = normalize(x, tree.bounds)
    node = tree.root
    while isinstance(node, Conditional):
        node = node.left if eval_rule(node.rule, xh) <= 0.0 else node.right
    return node.action


def predict_batch(tree: Nldt, states: np.ndarray) -> np.ndarray:
    """Vectorized `predict` over an (n, d) array of raw states."""
    xh = normalize_batch(states, tree.bounds)
    out = np.empty(len(xh), dtype=int)

    def route(node: NldtNode, idx: np.ndarray) -> None:
        if isinstance(node, Leaf):
            out[idx] = node.action
            return
        if len(idx) == 0:
            return
        f = eval_rule_batch(node.rule, xh[idx])
        left = f <= 0.0
        route(node.left, idx[left])
        route(node.right, idx[~left])

    route(tree.root, np.arange(len(xh)))
    return out


def _conditionals_preorder(node: NldtNode) -> list[Conditional]:
    if isinstance(node, Leaf):
        return []
    found = [node]
    found.extend(_conditionals_preorder(node.left))
    found.extend(_conditionals_preorder(node.right))
    return found


def flatten(tree: Nldt) -> np.ndarray:
    """All rule coefficients as one flat vector.

    Pre-order over conditional nodes; every weight comes first, then every
    bias block (theta1, and theta2 when the rule uses the modulus form).
    """
    rules = [n.rule for n in _conditionals_preorder(tree.root)]
    weights: list[float] = []
    biases: list[float] = []
    for rule in rules:
        weights.extend(rule.weights)
        biases.append(rule.bias1)
        if rule.modulus:
            biases.append(rule.bias2)
    return np.array(weights + biases, dtype=float)


def inject(tree: Nldt, values: Sequence[float]) -> Nldt:
    """Rebuild the tree with new coefficients from a `flatten`-shaped vector.

    Topology, exponents and modulus flags are untouched.  The vector is
    accepted as-is; optimizers are responsible for their own box.
    """
    values = np.asarray(values, dtype=float)
    rules = [n.rule for n in _conditionals_preorder(tree.root)]
    n_w = sum(r.n_terms for r in rules)
    n_theta = sum(1 + (1 if r.modulus else 0) for r in rules)
    if values.shape != (n_w + n_theta,):
        raise ValueError(f"expected {n_w + n_theta} coefficients, got {values.shape}")

    new_rules: dict[int, SplitRule] = {}
    w_at, th_at = 0, n_w
    for rule in rules:
        w = tuple(float(v) for v in values[w_at : w_at + rule.n_terms])
        w_at += rule.n_terms
        theta1 = float(values[th_at])
        th_at += 1
        theta2 = None
        if rule.modulus:
            theta2 = float(values[th_at])
            th_at += 1
        new_rules[id(rule)] = SplitRule(
            rule.exponents, w, theta1, theta2, rule.modulus, check_box=False
        )

    def rebuild(node: NldtNode) -> NldtNode:
        if isinstance(node, Leaf):
            return node
        return Conditional(new_rules[id(node.rule)], rebuild(node.left), rebuild(node.right))

    return Nldt(rebuild(tree.root), tree.bounds, tree.n_actions)


def depth_prefix(tree: Nldt, depth: int) -> Nldt:
    """Truncate to `depth`: conditionals at that depth collapse to majority leaves."""
    if depth < 0:
        raise ValueError("depth must be non-negative")

    def cut(node: NldtNode, remaining: int) -> NldtNode:
        if isinstance(node, Leaf):
            return node
        if remaining == 0:
            return Leaf.from_counts(node.class_counts)
        return Conditional(node.rule, cut(node.left, remaining - 1), cut(node.right, remaining - 1))

    return Nldt(cut(tree.root, depth), tree.bounds, tree.n_actions)


def _format_rule(rule: SplitRule, decimals: int) -> str:
    parts: list[str] = []
    for row, w in zip(rule.exponents, rule.weights):
        factors = []
        for j, b in enumerate(row):
            if b == 1:
                factors.append(f"xh{j}")
            elif b:
                factors.append(f"xh{j}^{b}")
        term = f"{w:+.{decimals}f}"
        if factors:
            term += "*" + "*".join(factors)
        parts.append(term)
    parts.append(f"{rule.bias1:+.{decimals}f}")
    body = " ".join(parts).lstrip("+")
    if rule.modulus:
        return f"|{body}| - {abs(rule.bias2):.{decimals}f}"
    return body


def export_rules(tree: Nldt, decimals: int = 2) -> str:
    """Human-readable nested if/else form of the whole tree.

    Coefficients are rounded for display only; JSON export keeps full
    precision.  xh{j} denotes the j-th normalized feature.
    """
    lines = [
        "# xh{j} = 1 + (x{j} - min_j) / (max_j - min_j)",
        "# min = [" + ", ".join(f"{v:.{decimals}f}" for v in tree.bounds.x_min) + "]",
        "# max = [" + ", ".join(f"{v:.{decimals}f}" for v in tree.bounds.x_max) + "]",
    ]

    def emit(node: NldtNode, indent: int) -> None:
        pad = "    " * indent
        if isinstance(node, Leaf):
            lines.append(f"{pad}action = {node.action}")
            return
        lines.append(f"{pad}if {_format_rule(node.rule, decimals)} <= 0:")
        emit(node.left, indent + 1)
        lines.append(f"{pad}else:")
        emit(node.right, indent + 1)

    emit(tree.root, 0)
    return "\n".join(lines) + "\n"


def _node_to_json(node: NldtNode) -> dict:
    if isinstance(node, Leaf):
        return {"action": node.action, "counts": list(node.class_counts)}
    rule = node.rule
    return {
        "rule": {
            "B": [list(row) for row in rule.exponents],
            "w": list(rule.weights),
            "theta1": rule.bias1,
            "theta2": rule.bias2,
            "m": int(rule.modulus),
        },
        "left": _node_to_json(node.left),
        "right": _node_to_json(node.right),
    }


def _node_from_json(obj: dict) -> NldtNode:
    if "action" in obj:
        return Leaf(int(obj["action"]), tuple(int(c) for c in obj["counts"]))
    spec = obj["rule"]
    rule = SplitRule(
        tuple(tuple(int(b) for b in row) for row in spec["B"]),
        tuple(float(w) for w in spec["w"]),
        float(spec["theta1"]),
        None if spec["theta2"] is None else float(spec["theta2"]),
        bool(spec["m"]),
        check_box=False,
    )
    return Conditional(rule, _node_from_json(obj["left"]), _node_from_json(obj["right"]))


def tree_to_json(tree: Nldt) -> str:
    """Canonical JSON serialization with full float precision."""
    doc = {
        "n_actions": tree.n_actions,
        "d": tree.d,
        "bounds": {"min": list(tree.bounds.x_min), "max": list(tree.bounds.x_max)},
        "root": _node_to_json(tree.root),
    }
    return json.dumps(doc, indent=2) + "\n"


def tree_from_json(text: str) -> Nldt:
    try:
        doc = json.loads(text)
        bounds = NormalizationBounds(
            tuple(float(v) for v in doc["bounds"]["min"]),
            tuple(float(v) for v in doc["bounds"]["max"]),
        )
        return Nldt(_node_from_json(doc["root"]), bounds, int(doc["n_actions"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed tree document: {exc}") from exc
