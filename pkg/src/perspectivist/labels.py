"""Exact label distributions from chained continuation queries.

A LabelTree is a trie of forced continuations. Each internal node is one
backend query (its candidates are the outgoing edges); each leaf names the
label its path spells, or ``None`` for paths that spell no valid label. A
label's probability is the sum over its leaves of the product of edge
probabilities, renormalized over valid labels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backend import ContinuationQuery
from .schema import LabelSchema, LabelValue

VALID_MASS_FLOOR = 1e-6
MODES = ("exact", "four_pass")


class TreeError(ValueError):
    pass


class DegenerateDistributionError(ValueError):
    def __init__(self, mass: float, context: str = ""):
        self.mass = mass
        super().__init__(f"valid label mass {mass:.3g} below floor {VALID_MASS_FLOOR}{context}")


@dataclass(frozen=True)
class Leaf:
    label: Optional[LabelValue]


@dataclass
class Node:
    children: dict = field(default_factory=dict)

    def add(self, pieces, label) -> None:
        head, rest = pieces[0], pieces[1:]
        child = self.children.get(head)
        if not rest:
            if isinstance(child, Node):
                raise TreeError(f"piece {head!r} is both a label end and a prefix of another label")
            if isinstance(child, Leaf) and child.label != label:
                raise TreeError(f"piece sequence ending {head!r} maps to two labels")
            self.children[head] = Leaf(label)
            return
        if isinstance(child, Leaf):
            raise TreeError(f"piece {head!r} is both a label end and a prefix of another label")
        if child is None:
            child = self.children[head] = Node()
        child.add(rest, label)


@dataclass
class LabelTree:
    schema: LabelSchema
    root: Node
    mode: str = "exact"
    name: str = ""

    def __post_init__(self):
        reachable = {leaf.label for _, leaf in self.leaves() if leaf.label is not None}
        for lab in reachable:
            if not self.schema.is_valid(lab):
                raise TreeError(f"leaf label {lab!r} is not valid under the schema")
        missing = [l for l in self.schema.labels() if l not in reachable]
        if missing and self.mode == "exact":
            raise TreeError(f"labels unreachable in tree: {missing}")

    @classmethod
    def from_sequences(cls, schema: LabelSchema, seqs: dict, mode: str = "exact", name: str = "") -> "LabelTree":
        """Build a trie from ``label -> list of piece sequences``."""
        root = Node()
        for label, alternatives in seqs.items():
            for pieces in alternatives:
                root.add(tuple(pieces), label)
        return cls(schema, root, mode, name)

    def leaves(self):
        """(path pieces, Leaf) for every leaf, depth-first in candidate order."""
        stack = [((), self.root)]
        while stack:
            path, node = stack.pop()
            for piece, child in reversed(list(node.children.items())):
                if isinstance(child, Leaf):
                    yield path + (piece,), child
                else:
                    stack.append((path + (piece,), child))

    def nodes(self):
        """(path pieces, Node) for every internal node, root first."""
        out = []
        stack = [((), self.root)]
        while stack:
            path, node = stack.pop(0)
            out.append((path, node))
            for piece, child in node.children.items():
                if isinstance(child, Node):
                    stack.append((path + (piece,), child))
        return out

    @property
    def n_passes(self) -> int:
        return len(self.nodes())


@dataclass
class LabelDistribution:
    schema: LabelSchema
    labels: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.labels) != len(self.probs):
            raise ValueError("labels/probs length mismatch")

    @classmethod
    def uniform(cls, schema: LabelSchema) -> "LabelDistribution":
        labels = schema.labels()
        return cls(schema, labels, np.full(len(labels), 1.0 / len(labels)))

    @classmethod
    def point(cls, schema: LabelSchema, label) -> "LabelDistribution":
        labels = schema.labels()
        p = np.zeros(len(labels))
        p[labels.index(schema.validate(label))] = 1.0
        return cls(schema, labels, p)

    @classmethod
    def from_mapping(cls, schema: LabelSchema, mass: dict) -> "LabelDistribution":
        labels = schema.labels()
        return cls(schema, labels, np.array([float(mass.get(l, 0.0)) for l in labels]))

    def prob(self, label) -> float:
        return float(self.probs[self.labels.index(self.schema.validate(label))])

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.probs.tolist()))

    def normalized(self) -> "LabelDistribution":
        return LabelDistribution(self.schema, list(self.labels), renormalize(self.probs))

    def marginals(self) -> np.ndarray:
        return marginals(self)

    def to_record(self, **meta) -> dict:
        return {
            **meta,
            "labels": [self.schema.to_json_label(l) for l in self.labels],
            "probs": self.probs.tolist(),
        }

    @classmethod
    def from_record(cls, schema: LabelSchema, rec: dict) -> "LabelDistribution":
        labels = [schema.validate(l) for l in rec["labels"]]
        if labels != schema.labels():
            return cls.from_mapping(schema, dict(zip(labels, rec["probs"])))
        return cls(schema, labels, np.array(rec["probs"], dtype=float))


def renormalize(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    total = p.sum()
    if total < VALID_MASS_FLOOR:
        raise DegenerateDistributionError(float(total))
    return p / total


def _digit_pieces(v: int, style: str) -> list:
    """Token pieces of a one-digit signed integer after the output prefix."""
    if abs(v) > 9:
        raise TreeError(f"label {v} needs more than one digit; supply a custom tree")
    if style == "json":
        return [" -" if v < 0 else " ", str(abs(v))]
    return ["-", str(abs(v))] if v < 0 else [str(v)]


def numeric_tree(schema: LabelSchema, style: str = "bare", name: str = "") -> LabelTree:
    seqs = {v: [_digit_pieces(v, style)] for v in schema.labels()}
    return LabelTree.from_sequences(schema, seqs, "exact", name)


def label_set_tree(schema: LabelSchema, close: str, mode: str = "exact", name: str = "") -> LabelTree:
    """Tree for space-separated label names ending in ``close``.

    exact: every ordering of every valid set, each ending in the close piece.
    Repeated names are never offered as candidates, so their mass is dropped.

    four_pass: a first-name pass, then one pass per first name over the
    other names (prefixed by a space) and the close piece. Two-name paths end
    without a closure query, and three-name sets are unreachable.
    """
    if schema.kind != "multi_binary":
        raise TreeError("label_set_tree needs a multi_binary schema")
    names = list(schema.label_names)
    root = Node()
    if mode == "four_pass":
        for first in names:
            node = root.children[first] = Node()
            for other in names:
                if other != first:
                    node.children[" " + other] = Leaf(schema.validate([first, other]))
            node.children[close] = Leaf(schema.validate([first]))
        return LabelTree(schema, root, mode, name)
    if mode != "exact":
        raise TreeError(f"unknown tree mode {mode!r}")

    def grow(node: Node, used: list):
        for nxt in names:
            if nxt in used:
                continue
            piece = nxt if not used else " " + nxt
            child = node.children[piece] = Node()
            grow(child, used + [nxt])
        if used:
            node.children[close] = Leaf(schema.validate(used) if schema.is_valid(used) else None)

    grow(root, [])
    return LabelTree(schema, root, mode, name)


# Output style of each competition dataset's prompt template.
_DATASET_STYLE = {"MP": "bare", "CSC": "bare", "Par": "json", "VEN": "json"}


def label_tree_for(
    schema: LabelSchema,
    dataset_name: str = "",
    mode: str = "exact",
    style: Optional[str] = None,
    close: Optional[str] = None,
) -> LabelTree:
    """Label tree for a schema.

    ``style`` ("bare" or "json") is inferred from the dataset name for the four
    competition datasets, defaulting to "bare". ``close`` is the piece ending a
    label-set value; by default the closing quote for json style and the turn
    close marker otherwise.
    """
    if mode not in MODES:
        raise TreeError(f"unknown tree mode {mode!r}")
    style = style or _DATASET_STYLE.get(dataset_name, "bare")
    if dataset_name in ("MP", "CSC", "Par", "VEN"):
        from .schema import PRESETS

        expected = PRESETS[dataset_name].schema
        if schema != expected:
            raise TreeError(f"schema {schema.to_dict()} does not match dataset {dataset_name}")
    if schema.kind == "multi_binary":
        if close is None:
            close = '"' if style == "json" else "<end_of_turn>"
        return label_set_tree(schema, close, mode, dataset_name)
    return numeric_tree(schema, style, dataset_name)


def tree_for_template(schema: LabelSchema, template, mode: str = "exact", name: str = "") -> LabelTree:
    return label_tree_for(schema, name, mode, style=template.output_style, close=template.value_close())


def compute_distribution(tree: LabelTree, prompt, backend, on_query=None) -> LabelDistribution:
    """Evaluate a label tree against a backend.

    ``prompt`` is a RenderedPrompt or plain string ending where the label value
    begins. Conditional passes run in sequence since each extends the forced
    prefix. ``on_query`` is called with every (query, result) pair.
    """
    text = prompt if isinstance(prompt, str) else prompt.text
    labels = tree.schema.labels()
    index = {l: i for i, l in enumerate(labels)}
    mass = np.zeros(len(labels))

    stack = [("", tree.root, 1.0)]
    while stack:
        path, node, p = stack.pop()
        q = ContinuationQuery(text + path, tuple(node.children))
        try:
            res = backend.query(q)
        except Exception as e:
            e.forced_output = path
            raise
        if on_query is not None:
            on_query(q, res)
        for piece, cp in zip(q.candidates, res.probabilities):
            child = node.children[piece]
            pp = p * cp
            if isinstance(child, Leaf):
                if child.label is not None:
                    mass[index[child.label]] += pp
            elif pp > 0.0:
                stack.append((path + piece, child, pp))

    total = mass.sum()
    if total < VALID_MASS_FLOOR:
        raise DegenerateDistributionError(float(total))
    return LabelDistribution(tree.schema, labels, mass / total)


def marginals(dist: LabelDistribution) -> np.ndarray:
    """P(label positive) for each name of a multi_binary schema."""
    schema = dist.schema
    if schema.kind != "multi_binary":
        raise ValueError("marginals need a multi_binary distribution")
    out = np.zeros(len(schema.label_names))
    for label, p in zip(dist.labels, dist.probs):
        for j, name in enumerate(schema.label_names):
            if name in label:
                out[j] += p
    return out


def write_distributions(path, records) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
