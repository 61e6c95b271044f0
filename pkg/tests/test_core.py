"""Tree representation: normalization, rule evaluation, flatten/inject,
prefixes, text and JSON export."""

import json

import numpy as np
import pytest

from conftest import (
    CARTPOLE_X_MIN,
    MOUNTAINCAR_X_MIN,
    build_cartpole_tree,
    build_mountaincar_tree,
    random_rule,
    random_tree,
)
from nldtree.core import (
    Conditional,
    DomainError,
    Leaf,
    Nldt,
    NormalizationBounds,
    SplitRule,
    depth_prefix,
    eval_rule,
    eval_rule_batch,
    export_rules,
    flatten,
    inject,
    iter_nodes,
    normalize,
    normalize_batch,
    predict,
    predict_batch,
    rule_complexity,
    tree_from_json,
    tree_to_json,
)


# --- normalization -------------------------------------------------------


def test_normalize_maps_bounds_to_unit_window():
    bounds = NormalizationBounds((-0.91, -0.43, -0.05, -0.40), (1.37, 0.88, 0.10, 0.45))
    assert normalize(bounds.x_min, bounds) == pytest.approx([1.0, 1.0, 1.0, 1.0])
    assert normalize(bounds.x_max, bounds) == pytest.approx([2.0, 2.0, 2.0, 2.0])


def test_normalize_midpoint():
    bounds = NormalizationBounds((0.0,), (10.0,))
    assert normalize([5.0], bounds) == pytest.approx([1.5])


def test_normalize_extrapolates_out_of_range():
    # Values beyond the recorded bounds keep moving linearly; they are
    # never clamped, so replayed rules see the same formula everywhere.
    bounds = NormalizationBounds((0.0,), (10.0,))
    assert normalize([-5.0], bounds) == pytest.approx([0.5])
    assert normalize([20.0], bounds) == pytest.approx([3.0])


def test_normalize_rejects_dimension_mismatch():
    bounds = NormalizationBounds((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        normalize([0.5], bounds)


def test_normalize_batch_matches_scalar_path():
    rng = np.random.default_rng(3)
    bounds = NormalizationBounds((-1.0, 2.0, 0.5), (4.0, 3.0, 9.0))
    states = rng.uniform(-2.0, 10.0, size=(40, 3))
    batch = normalize_batch(states, bounds)
    for row, out in zip(states, batch):
        assert out == pytest.approx(normalize(row, bounds))


def test_bounds_reject_inverted_or_nonfinite_ranges():
    with pytest.raises(ValueError):
        NormalizationBounds((1.0,), (1.0,))
    with pytest.raises(ValueError):
        NormalizationBounds((2.0,), (1.0,))
    with pytest.raises(ValueError):
        NormalizationBounds((float("nan"),), (1.0,))


# --- rule evaluation -----------------------------------------------------


def test_published_cartpole_rule_at_lower_corner(cartpole_tree):
    # At x = x_min every normalized feature is 1, so the band body is
    # -0.18 - 0.63 + 0.67 = -0.14 and the rule value is |−0.14| − 0.24.
    rule = cartpole_tree.root.rule
    xh = normalize(CARTPOLE_X_MIN, cartpole_tree.bounds)
    assert eval_rule(rule, xh) == pytest.approx(-0.10)
    assert predict(cartpole_tree, CARTPOLE_X_MIN) == 0


def test_published_mountaincar_root_at_lower_corner(mountaincar_tree):
    rule = mountaincar_tree.root.rule
    assert eval_rule(rule, [1.0, 1.0]) == pytest.approx(0.03)
    # Positive rule value routes right, where the coasting action lives.
    assert predict(mountaincar_tree, MOUNTAINCAR_X_MIN) == 0


def test_modulus_rule_equals_folded_plain_rule():
    rng = np.random.default_rng(11)
    for _ in range(200):
        rule = random_rule(rng, d=3)
        if not rule.modulus:
            continue
        twin = SplitRule(
            rule.exponents, rule.weights, rule.bias1, None, False, check_box=False
        )
        xh = rng.uniform(1.0, 2.0, 3)
        expected = abs(eval_rule(twin, xh)) - abs(rule.bias2)
        assert eval_rule(rule, xh) == pytest.approx(expected)


def test_eval_rule_batch_matches_loop():
    rng = np.random.default_rng(7)
    rule = random_rule(rng, d=4)
    xh = rng.uniform(1.0, 2.0, size=(50, 4))
    batch = eval_rule_batch(rule, xh)
    assert batch == pytest.approx([eval_rule(rule, row) for row in xh])


def test_negative_exponent_at_zero_is_a_domain_error():
    rule = SplitRule(((-1,),), (0.5,), 0.1)
    with pytest.raises(DomainError, match="feature 0"):
        eval_rule(rule, [0.0])


# --- complexity and validation -------------------------------------------


def test_rule_complexity_counts_nonzero_exponents(cartpole_tree):
    rule = SplitRule(((1, 0), (0, -2)), (0.5, -0.5), 0.0)
    assert rule_complexity(rule) == 2
    assert rule_complexity(cartpole_tree.root.rule) == 3


def test_rule_complexity_ignores_coefficients(mountaincar_tree):
    before = [rule_complexity(n.rule) for _, n in iter_nodes(mountaincar_tree) if isinstance(n, Conditional)]
    moved = inject(mountaincar_tree, np.linspace(-0.9, 0.9, 9))
    after = [rule_complexity(n.rule) for _, n in iter_nodes(moved) if isinstance(n, Conditional)]
    assert before == after


def test_split_rule_validation():
    with pytest.raises(ValueError):
        SplitRule(((4,),), (0.5,), 0.0)  # exponent outside the allowed set
    with pytest.raises(ValueError):
        SplitRule(((1,), (0,)), (0.5, 0.5), 0.0)  # all-zero term row
    with pytest.raises(ValueError):
        SplitRule(((1,),), (0.5, 0.5), 0.0)  # weight count mismatch
    with pytest.raises(ValueError):
        SplitRule(((1,),), (0.5,), 0.0, modulus=True)  # band needs a width
    with pytest.raises(ValueError):
        SplitRule(((1,),), (0.5,), 0.0, bias2=0.3)  # width without band form
    with pytest.raises(ValueError):
        SplitRule(((1,),), (1.5,), 0.0)  # coefficient outside [-1, 1]


def test_check_box_escape_admits_out_of_box_bias():
    rule = SplitRule(((1,),), (0.5,), 1.39, check_box=False)
    assert rule.bias1 == 1.39


def test_leaf_action_must_be_majority():
    with pytest.raises(ValueError):
        Leaf(1, (10, 3))
    with pytest.raises(ValueError):
        Leaf(1, (5, 5))  # ties break toward the lower action id
    assert Leaf(0, (5, 5)).action == 0
    assert Leaf.from_counts((2, 7, 2)).action == 1
    assert Leaf.pure(2, 4).class_counts == (0, 0, 1, 0)


def test_conditional_counts_sum_children(mountaincar_tree):
    root = mountaincar_tree.root
    left = np.array(root.left.class_counts)
    right = np.array(root.right.class_counts)
    assert root.class_counts == tuple(left + right)


# --- flatten / inject ----------------------------------------------------


def test_flatten_published_mountaincar_tree(mountaincar_tree):
    # Pre-order weights for both rules, then both bias blocks.
    expected = [-0.63, 0.28, -0.22, -0.28, -0.30, 0.96, 0.36, 1.39, 0.53]
    assert flatten(mountaincar_tree).tolist() == pytest.approx(expected)


def test_flatten_length_single_band_rule():
    rule = SplitRule(((1, 0), (0, 1)), (0.5, -0.5), 0.1, 0.2, modulus=True)
    tree = Nldt(
        Conditional(rule, Leaf.pure(0, 2), Leaf.pure(1, 2)),
        NormalizationBounds((0.0, 0.0), (1.0, 1.0)),
        2,
    )
    assert len(flatten(tree)) == 4


def test_flatten_length_mixed_rule_forms():
    def band(p):
        rows = tuple(tuple(1 if j == i % 2 else 0 for j in range(2)) for i in range(p))
        return SplitRule(rows, (0.1,) * p, 0.0, 0.2, modulus=True)

    plain = SplitRule(((1, 0),), (0.3,), 0.1)
    root = Conditional(
        band(3),
        Conditional(band(3), Conditional(plain, Leaf.pure(0, 2), Leaf.pure(1, 2)), Leaf.pure(1, 2)),
        Conditional(band(2), Leaf.pure(0, 2), Leaf.pure(1, 2)),
    )
    tree = Nldt(root, NormalizationBounds((0.0, 0.0), (1.0, 1.0)), 2)
    # Weights 3+3+2+1 plus biases 2+2+2+1.
    assert len(flatten(tree)) == 16


def test_inject_roundtrip_on_random_trees():
    rng = np.random.default_rng(23)
    for _ in range(200):
        tree = random_tree(rng)
        vec = flatten(tree)
        if len(vec) == 0:
            continue
        new_vec = rng.uniform(-1.0, 1.0, len(vec))
        rebuilt = inject(tree, new_vec)
        assert flatten(rebuilt).tolist() == pytest.approx(new_vec.tolist())
        # Round-tripping the original coefficients is the identity.
        same = inject(tree, vec)
        states = rng.uniform(0.0, 1.0, size=(20, tree.d))
        assert predict_batch(same, states).tolist() == predict_batch(tree, states).tolist()


def test_inject_rejects_wrong_length(mountaincar_tree):
    with pytest.raises(ValueError):
        inject(mountaincar_tree, [0.0] * 5)


def test_inject_keeps_structure(mountaincar_tree):
    moved = inject(mountaincar_tree, np.zeros(9))
    assert moved.n_rules == mountaincar_tree.n_rules
    assert moved.depth == mountaincar_tree.depth
    for (pa, na), (pb, nb) in zip(iter_nodes(mountaincar_tree), iter_nodes(moved)):
        assert pa == pb
        if isinstance(na, Conditional):
            assert na.rule.exponents == nb.rule.exponents
            assert na.rule.modulus == nb.rule.modulus


# --- prediction ----------------------------------------------------------


def test_predict_batch_matches_scalar_predict():
    rng = np.random.default_rng(31)
    for _ in range(20):
        tree = random_tree(rng)
        states = rng.uniform(0.0, 1.0, size=(40, tree.d))
        batch = predict_batch(tree, states)
        assert batch.tolist() == [predict(tree, row) for row in states]


def test_tree_shape_properties(mountaincar_tree):
    assert mountaincar_tree.depth == 2
    assert mountaincar_tree.n_rules == 2
    assert sorted(mountaincar_tree.rule_lengths()) == [2, 4]


def test_iter_nodes_is_breadth_first(mountaincar_tree):
    paths = [path for path, _ in iter_nodes(mountaincar_tree)]
    assert paths == ["", "L", "R", "LL", "LR"]


# --- prefixes ------------------------------------------------------------


def test_depth_prefix_truncates_to_majority_leaves(mountaincar_tree):
    flat = depth_prefix(mountaincar_tree, 0)
    assert isinstance(flat.root, Leaf)
    assert flat.root.class_counts == mountaincar_tree.root.class_counts

    one = depth_prefix(mountaincar_tree, 1)
    assert one.depth == 1
    # The right branch was already a leaf, so shallow-routed states agree.
    assert predict(one, MOUNTAINCAR_X_MIN) == predict(mountaincar_tree, MOUNTAINCAR_X_MIN)


def test_depth_prefix_never_exceeds_requested_depth():
    rng = np.random.default_rng(41)
    for _ in range(30):
        tree = random_tree(rng, depth=4)
        for k in range(4):
            assert depth_prefix(tree, k).depth <= k


def test_depth_prefix_rejects_negative_depth(mountaincar_tree):
    with pytest.raises(ValueError):
        depth_prefix(mountaincar_tree, -1)


# --- export --------------------------------------------------------------


def test_export_rules_text_shape(cartpole_tree):
    text = export_rules(cartpole_tree)
    lines = text.splitlines()
    assert lines[0] == "# xh{j} = 1 + (x{j} - min_j) / (max_j - min_j)"
    assert lines[1] == "# min = [-0.91, -0.43, -0.05, -0.40]"
    assert lines[2] == "# max = [1.37, 0.88, 0.10, 0.45]"
    assert lines[3] == "if |-0.18*xh0*xh2^-2 -0.63*xh3^-2 +0.67| - 0.24 <= 0:"
    assert lines[4] == "    action = 0"
    assert lines[5] == "else:"
    assert lines[6] == "    action = 1"


def test_json_roundtrip_is_lossless():
    rng = np.random.default_rng(53)
    for _ in range(50):
        tree = random_tree(rng)
        back = tree_from_json(tree_to_json(tree))
        assert back.n_actions == tree.n_actions
        assert back.bounds.x_min == tree.bounds.x_min
        assert back.bounds.x_max == tree.bounds.x_max
        assert flatten(back).tolist() == flatten(tree).tolist()
        states = rng.uniform(0.0, 1.0, size=(25, tree.d))
        assert predict_batch(back, states).tolist() == predict_batch(tree, states).tolist()


def test_text_rounding_does_not_leak_into_json(mountaincar_tree):
    # Display rounds to two decimals; the JSON document keeps the exact
    # coefficients bit for bit.
    doc = json.loads(tree_to_json(mountaincar_tree))
    back = tree_from_json(json.dumps(doc))
    assert flatten(back).tolist() == flatten(mountaincar_tree).tolist()


def test_malformed_tree_documents_are_rejected():
    with pytest.raises(ValueError, match="malformed tree document"):
        tree_from_json("{\"n_actions\": 2}")
    with pytest.raises(ValueError):
        tree_from_json("not json at all")
