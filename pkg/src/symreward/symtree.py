"""Symbolic reward trees.

A tree is built from a fixed dictionary of numeric operators over a feature
vector plus the constants 0 and 1. Trees are generated by the grow method,
varied by subtree replacement and subtree swap, serialized to a parenthesized
prefix form, and exported as single-assignment pseudocode.

Depth is operational: terminals count for zero, each operator layer adds one.
All nodes are immutable; variation operators return new trees and may share
structure with their inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

# Operator dictionary: tag -> arity. None marks the two variadic extrema,
# whose arity is fixed per node at creation time within VARIADIC_RANGE.
OP_ARITY = {
    "add": 2,
    "subtract": 2,
    "multiply": 2,
    "cos": 1,
    "sin": 1,
    "tan": 1,
    "max": None,
    "min": None,
    "pass_greater": 2,
    "pass_smaller": 2,
    "equal_to": 2,
    "gate": 3,
    "square": 1,
    "is_negative": 1,
    "div_by_100": 1,
    "div_by_10": 1,
    "protected_div": 2,
}

OP_TAGS = tuple(OP_ARITY)

VARIADIC_RANGE = (2, 5)

CONST_CHOICES = (0.0, 1.0)

# Default generation probabilities: operator vs terminal below the depth cap,
# feature vs constant at a terminal.
P_OPERATOR = 0.7
P_FEATURE = 0.9


@dataclass(frozen=True)
class Feature:
    """Terminal reading one entry of the feature vector."""

    index: int

    def __post_init__(self):
        if not isinstance(self.index, (int, np.integer)) or self.index < 0:
            raise ValueError(f"feature index must be a non-negative int, got {self.index!r}")


@dataclass(frozen=True)
class Const:
    """Terminal holding one of the admitted constants."""

    value: float

    def __post_init__(self):
        if self.value not in CONST_CHOICES:
            raise ValueError(f"constant must be one of {CONST_CHOICES}, got {self.value!r}")


@dataclass(frozen=True)
class Op:
    """Operator node applying one dictionary entry to its children."""

    tag: str
    children: tuple

    def __post_init__(self):
        arity = OP_ARITY.get(self.tag)
        if self.tag not in OP_ARITY:
            raise ValueError(f"unknown operator tag {self.tag!r}")
        n = len(self.children)
        if arity is None:
            lo, hi = VARIADIC_RANGE
            if not lo <= n <= hi:
                raise ValueError(f"{self.tag} takes {lo} to {hi} children, got {n}")
        elif n != arity:
            raise ValueError(f"{self.tag} takes {arity} children, got {n}")


_tree_ids = itertools.count()


@dataclass
class SymTree:
    """A rooted tree over a feature vector of known width.

    Equality is structural; the id only labels individuals for bookkeeping.
    """

    root: object
    feature_dim: int
    id: int = field(default_factory=lambda: next(_tree_ids), compare=False)

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        bad = max_feature_index(self.root)
        if bad is not None and bad >= self.feature_dim:
            raise ValueError(f"feature index {bad} out of range for feature_dim {self.feature_dim}")


def eval_op(tag, args):
    """Apply one operator to scalar arguments, tolerating inf and NaN.

    Args are floats; the result is a float. Semantics are exact IEEE double
    operations with no clamping; only protected_div repairs its output.
    """
    with np.errstate(all="ignore"):
        return _eval_op(tag, args)


def _eval_op(tag, args):
    if tag == "add":
        return float(args[0] + args[1])
    if tag == "subtract":
        return float(args[0] - args[1])
    if tag == "multiply":
        return float(args[0] * args[1])
    if tag == "cos":
        return float(np.cos(args[0]))
    if tag == "sin":
        return float(np.sin(args[0]))
    if tag == "tan":
        return float(np.tan(args[0]))
    if tag == "max":
        return float(np.maximum.reduce(np.asarray(args, dtype=np.float64)))
    if tag == "min":
        return float(np.minimum.reduce(np.asarray(args, dtype=np.float64)))
    if tag == "pass_greater":
        return float(args[0]) if args[0] > args[1] else float(args[1])
    if tag == "pass_smaller":
        return float(args[0]) if args[0] < args[1] else float(args[1])
    if tag == "equal_to":
        return 1.0 if args[0] == args[1] else 0.0
    if tag == "gate":
        return float(args[0]) if args[2] <= 0 else float(args[1])
    if tag == "square":
        return float(args[0] * args[0])
    if tag == "is_negative":
        return 1.0 if args[0] < 0 else 0.0
    if tag == "div_by_100":
        return float(args[0] / 100.0)
    if tag == "div_by_10":
        return float(args[0] / 10.0)
    if tag == "protected_div":
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.divide(args[0], args[1])
        if np.isinf(q) or np.isnan(q):
            return 1.0
        return float(q)
    raise ValueError(f"unknown operator tag {tag!r}")


def evaluate(tree, features):
    """Evaluate the tree on one feature vector; returns a float."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 1 or feats.shape[0] != tree.feature_dim:
        raise ValueError(f"expected a length-{tree.feature_dim} feature vector, got shape {feats.shape}")
    with np.errstate(all="ignore"):
        return _eval(tree.root, feats)


def _eval(node, feats):
    if isinstance(node, Feature):
        return float(feats[node.index])
    if isinstance(node, Const):
        return node.value
    return _eval_op(node.tag, [_eval(c, feats) for c in node.children])


def evaluate_batch(tree, features):
    """Evaluate the tree on rows of a (n, feature_dim) array; returns (n,).

    Agrees with per-row evaluate() bit for bit, except that NaN results may
    carry a different sign or payload (vectorized trig kernels quiet NaN
    differently than the scalar ones). Used for minibatch reward shaping,
    where the sanitizer replaces every NaN anyway.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != tree.feature_dim:
        raise ValueError(f"expected (n, {tree.feature_dim}) features, got shape {x.shape}")
    with np.errstate(all="ignore"):
        return _eval_batch(tree.root, x)


def _eval_batch(node, x):
    if isinstance(node, Feature):
        return x[:, node.index].copy()
    if isinstance(node, Const):
        return np.full(x.shape[0], node.value)
    args = [_eval_batch(c, x) for c in node.children]
    tag = node.tag
    if tag == "add":
        return args[0] + args[1]
    if tag == "subtract":
        return args[0] - args[1]
    if tag == "multiply":
        return args[0] * args[1]
    if tag == "cos":
        return np.cos(args[0])
    if tag == "sin":
        return np.sin(args[0])
    if tag == "tan":
        return np.tan(args[0])
    if tag == "max":
        return np.maximum.reduce(args)
    if tag == "min":
        return np.minimum.reduce(args)
    if tag == "pass_greater":
        return np.where(args[0] > args[1], args[0], args[1])
    if tag == "pass_smaller":
        return np.where(args[0] < args[1], args[0], args[1])
    if tag == "equal_to":
        return (args[0] == args[1]).astype(np.float64)
    if tag == "gate":
        return np.where(args[2] <= 0, args[0], args[1])
    if tag == "square":
        return args[0] * args[0]
    if tag == "is_negative":
        return (args[0] < 0).astype(np.float64)
    if tag == "div_by_100":
        return args[0] / 100.0
    if tag == "div_by_10":
        return args[0] / 10.0
    if tag == "protected_div":
        q = np.divide(args[0], args[1])
        q[~np.isfinite(q)] = 1.0
        return q
    raise ValueError(f"unknown operator tag {tag!r}")


def depth(node):
    """Operational depth: 0 for a terminal, 1 + deepest child for an operator."""
    if not isinstance(node, Op):
        return 0
    return 1 + max(depth(c) for c in node.children)


def count_operators(node):
    if not isinstance(node, Op):
        return 0
    return 1 + sum(count_operators(c) for c in node.children)


def max_feature_index(node):
    """Largest feature index used, or None for a constant-only tree."""
    if isinstance(node, Feature):
        return node.index
    if isinstance(node, Const):
        return None
    best = None
    for c in node.children:
        m = max_feature_index(c)
        if m is not None and (best is None or m > best):
            best = m
    return best


def random_tree(feature_dim, max_depth, rng, p_operator=P_OPERATOR, p_feature=P_FEATURE):
    """Grow a random tree of operational depth at most max_depth.

    Below the cap each node is an operator with probability p_operator;
    at the cap a terminal is forced. Terminals are features with probability
    p_feature, else a constant drawn uniformly from {0, 1}.
    """
    if max_depth < 0:
        raise ValueError(f"max_depth must be >= 0, got {max_depth}")
    root = _grow(feature_dim, max_depth, rng, p_operator, p_feature)
    return SymTree(root, feature_dim)


def _grow(feature_dim, budget, rng, p_operator, p_feature):
    if budget >= 1 and rng.random() < p_operator:
        tag = OP_TAGS[rng.integers(len(OP_TAGS))]
        arity = OP_ARITY[tag]
        if arity is None:
            lo, hi = VARIADIC_RANGE
            arity = int(rng.integers(lo, hi + 1))
        children = tuple(_grow(feature_dim, budget - 1, rng, p_operator, p_feature) for _ in range(arity))
        return Op(tag, children)
    return _terminal(feature_dim, rng, p_feature)


def _terminal(feature_dim, rng, p_feature):
    if rng.random() < p_feature:
        return Feature(int(rng.integers(feature_dim)))
    return Const(CONST_CHOICES[rng.integers(len(CONST_CHOICES))])


def _sites(node, path=(), level=0):
    """Yield (path, level) for every node; level counts operator ancestors."""
    yield path, level
    if isinstance(node, Op):
        for i, c in enumerate(node.children):
            yield from _sites(c, path + (i,), level + 1)


def _subtree(node, path):
    for i in path:
        node = node.children[i]
    return node


def _replace(node, path, new):
    if not path:
        return new
    i = path[0]
    children = list(node.children)
    children[i] = _replace(children[i], path[1:], new)
    return Op(node.tag, tuple(children))


def mutate_tree(tree, max_depth, rng, p_operator=P_OPERATOR, p_feature=P_FEATURE):
    """Replace a uniformly chosen node with a fresh random subtree.

    The replacement budget is max_depth minus the node's level, so the result
    never exceeds max_depth. The input tree is not modified.
    """
    sites = list(_sites(tree.root))
    path, level = sites[rng.integers(len(sites))]
    sub = _grow(tree.feature_dim, max_depth - level, rng, p_operator, p_feature)
    return SymTree(_replace(tree.root, path, sub), tree.feature_dim)


def crossover_trees(a, b, max_depth, rng, max_tries=20):
    """Graft a uniformly chosen subtree of b onto a uniformly chosen site of a.

    Site and donor are re-drawn up to max_tries times until the offspring
    respects max_depth; if no admissible pair is found, a copy of a is
    returned. Parents must share feature_dim and are never modified.
    """
    if a.feature_dim != b.feature_dim:
        raise ValueError(f"parents disagree on feature_dim: {a.feature_dim} vs {b.feature_dim}")
    a_sites = list(_sites(a.root))
    b_nodes = [_subtree(b.root, p) for p, _ in _sites(b.root)]
    for _ in range(max_tries):
        path, level = a_sites[rng.integers(len(a_sites))]
        donor = b_nodes[rng.integers(len(b_nodes))]
        if level + depth(donor) <= max_depth:
            return SymTree(_replace(a.root, path, donor), a.feature_dim)
    return SymTree(a.root, a.feature_dim)


class ParseError(ValueError):
    """Raised on malformed serialized trees; carries the offending position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (position {position})")
        self.position = position


def serialize(tree):
    """Render the tree in parenthesized prefix form, e.g. (add (cos f3) c1)."""
    return _ser(tree.root)


def _ser(node):
    if isinstance(node, Feature):
        return f"f{node.index}"
    if isinstance(node, Const):
        return f"c{int(node.value)}"
    return "(" + " ".join([node.tag] + [_ser(c) for c in node.children]) + ")"


def _tokenize(text):
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


def deserialize(text, feature_dim=None):
    """Parse the prefix form back into a SymTree.

    When feature_dim is omitted it is inferred as one past the largest
    feature index (minimum 1). Malformed input raises ParseError naming the
    position and reason.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty input", 0)
    node, rest = _parse(tokens)
    if rest:
        raise ParseError(f"trailing input {rest[0][0]!r}", rest[0][1])
    inferred = max_feature_index(node)
    inferred = 1 if inferred is None else inferred + 1
    if feature_dim is None:
        feature_dim = inferred
    elif inferred > feature_dim:
        raise ParseError(f"feature index {inferred - 1} out of range for feature_dim {feature_dim}", 0)
    return SymTree(node, feature_dim)


def _parse(tokens):
    tok, pos = tokens[0]
    if tok == "(":
        if len(tokens) < 2:
            raise ParseError("unclosed parenthesis", pos)
        tag, tag_pos = tokens[1]
        if tag in "()":
            raise ParseError("expected an operator tag after (", tag_pos)
        if tag not in OP_ARITY:
            raise ParseError(f"unknown operator tag {tag!r}", tag_pos)
        rest = tokens[2:]
        children = []
        while rest and rest[0][0] != ")":
            child, rest = _parse(rest)
            children.append(child)
        if not rest:
            raise ParseError("unclosed parenthesis", pos)
        rest = rest[1:]
        arity = OP_ARITY[tag]
        n = len(children)
        if arity is None:
            lo, hi = VARIADIC_RANGE
            if not lo <= n <= hi:
                raise ParseError(f"{tag} takes {lo} to {hi} children, got {n}", tag_pos)
        elif n != arity:
            raise ParseError(f"{tag} takes {arity} children, got {n}", tag_pos)
        return Op(tag, tuple(children)), rest
    if tok == ")":
        raise ParseError("unexpected )", pos)
    if tok.startswith("f") and tok[1:].isdigit():
        return Feature(int(tok[1:])), tokens[1:]
    if tok in ("c0", "c1"):
        return Const(float(tok[1])), tokens[1:]
    raise ParseError(f"unreadable token {tok!r}", pos)


def unroll(tree, feature_names):
    """Flatten the tree into single-assignment pseudocode.

    One `v<i> = op(...)` line per operator node in dependency order, then a
    final `reward = <result>` line. Features print under the given names and
    constants print as the literals 0 and 1.
    """
    names = list(feature_names)
    if len(names) != tree.feature_dim:
        raise ValueError(f"expected {tree.feature_dim} feature names, got {len(names)}")
    lines = []
    counter = itertools.count(1)

    def emit(node):
        if isinstance(node, Feature):
            return names[node.index]
        if isinstance(node, Const):
            return str(int(node.value))
        args = [emit(c) for c in node.children]
        var = f"v{next(counter)}"
        lines.append(f"{var} = {node.tag}({', '.join(args)})")
        return var

    result = emit(tree.root)
    lines.append(f"reward = {result}")
    return "\n".join(lines)
