"""From per-rater label distributions to perspectivist and soft submissions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .labels import LabelDistribution, marginals
from .schema import LabelSchema, LabelValue

STRATEGIES = ("mean", "mixed")


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class PerspectivistPrediction:
    annotator_id: str
    instance_id: str
    label: LabelValue


@dataclass
class SoftPrediction:
    """Soft label for one instance.

    ``labels`` are the schema's labels for binary/likert, or the label names for
    multi_binary, in which case ``probs`` are per-name marginals.
    """

    instance_id: str
    labels: list
    probs: np.ndarray
    strategy: str = "mean"

    def to_record(self, schema: LabelSchema) -> dict:
        labels = self.labels if schema.kind == "multi_binary" else [int(l) for l in self.labels]
        return {"instance_id": self.instance_id, "labels": labels, "probs": np.asarray(self.probs).tolist(),
                "strategy": self.strategy}

    @classmethod
    def from_record(cls, rec: dict) -> "SoftPrediction":
        return cls(rec["instance_id"], list(rec["labels"]), np.asarray(rec["probs"], dtype=float),
                   rec.get("strategy", "mean"))


def decide_argmax(dist: LabelDistribution) -> LabelValue:
    """Most probable label; ties go to the lowest label index.

    For label sets each name is decided separately (positive iff its marginal
    exceeds 0.5). If that leaves no positive name under an at-least-one
    constraint, the name with the largest marginal is switched on.
    """
    schema = dist.schema
    if schema.kind != "multi_binary":
        return dist.labels[int(np.argmax(dist.probs))]
    m = marginals(dist)
    chosen = [n for n, p in zip(schema.label_names, m) if p > 0.5]
    if not chosen and schema.at_least_one_positive:
        chosen = [schema.label_names[int(np.argmax(m))]]
    return schema.validate(chosen)


def decide_median(dist: LabelDistribution) -> LabelValue:
    """Smallest label whose CDF reaches 0.5."""
    if not dist.schema.ordered:
        raise AggregationError("median needs an ordered label schema")
    cdf = np.cumsum(dist.probs) / dist.probs.sum()
    i = int(np.searchsorted(cdf, 0.5 - 1e-12, side="left"))
    return dist.labels[min(i, len(dist.labels) - 1)]


def decide(dist: LabelDistribution) -> LabelValue:
    """Loss-minimizing single answer: median for Likert, argmax otherwise."""
    return decide_median(dist) if dist.schema.kind == "likert" else decide_argmax(dist)


def soft_vector(dist: LabelDistribution) -> np.ndarray:
    return marginals(dist) if dist.schema.kind == "multi_binary" else np.asarray(dist.probs, dtype=float)


def soft_labels(schema: LabelSchema) -> list:
    return list(schema.label_names) if schema.kind == "multi_binary" else schema.labels()


def one_hot(schema: LabelSchema, label: LabelValue) -> np.ndarray:
    label = schema.validate(label)
    if schema.kind == "multi_binary":
        return np.array([1.0 if n in label else 0.0 for n in schema.label_names])
    v = np.zeros(len(schema.labels()))
    v[schema.labels().index(label)] = 1.0
    return v


def _check(dists: Sequence[LabelDistribution]) -> LabelSchema:
    if not dists:
        raise AggregationError("no distributions to aggregate")
    schema = dists[0].schema
    if any(d.schema != schema for d in dists):
        raise AggregationError("distributions use different schemas")
    return schema


def aggregate_mean(dists: Sequence[LabelDistribution], instance_id: str = "") -> SoftPrediction:
    schema = _check(dists)
    v = np.mean([soft_vector(d) for d in dists], axis=0)
    return SoftPrediction(instance_id, soft_labels(schema), v, "mean")


def aggregate_mixed(
    dists: Sequence[LabelDistribution],
    decisions: Sequence,
    instance_id: str = "",
) -> SoftPrediction:
    """Equal-weight blend of the mean distribution and the mean one-hot decision."""
    schema = _check(dists)
    if len(decisions) != len(dists):
        raise AggregationError(f"{len(dists)} distributions but {len(decisions)} decisions")
    labels = [d.label if isinstance(d, PerspectivistPrediction) else d for d in decisions]
    mean_dist = np.mean([soft_vector(d) for d in dists], axis=0)
    mean_hot = np.mean([one_hot(schema, l) for l in labels], axis=0)
    return SoftPrediction(instance_id, soft_labels(schema), 0.5 * mean_dist + 0.5 * mean_hot, "mixed")


def aggregate(strategy: str, dists, instance_id: str = "", decisions: Optional[Sequence] = None) -> SoftPrediction:
    if strategy == "mean":
        return aggregate_mean(dists, instance_id)
    if strategy == "mixed":
        if decisions is None:
            decisions = [decide(d) for d in dists]
        return aggregate_mixed(dists, decisions, instance_id)
    raise AggregationError(f"unknown strategy {strategy!r}")


def select_strategy(dev_scores: dict) -> str:
    """Lowest dev loss; ties keep the earlier (configured) strategy."""
    if not dev_scores:
        raise AggregationError("no strategies scored")
    best = None
    for name, score in dev_scores.items():
        if best is None or score < dev_scores[best]:
            best = name
    return best
