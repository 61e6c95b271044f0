"""Distillation of black-box control policies into nonlinear decision trees."""

from .core import (
    Conditional,
    DomainError,
    EXPONENT_SET,
    Leaf,
    Nldt,
    NldtNode,
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

__all__ = [
    "Conditional",
    "DomainError",
    "EXPONENT_SET",
    "Leaf",
    "Nldt",
    "NldtNode",
    "NormalizationBounds",
    "SplitRule",
    "depth_prefix",
    "eval_rule",
    "eval_rule_batch",
    "export_rules",
    "flatten",
    "inject",
    "iter_nodes",
    "normalize",
    "normalize_batch",
    "predict",
    "predict_batch",
    "rule_complexity",
    "tree_from_json",
    "tree_to_json",
]

__version__ = "0.1.0"
