"""Synthetic rater populations with known response distributions.

Each instance carries a scalar ``difficulty`` on the label scale. A rater
answers around ``difficulty + bias``: ordered labels follow a discretized
logistic with temperature ``noise``; label sets switch each name on with
probability sigmoid((0.75 - |position - location|) / noise), conditioned on at
least one name being on. ``noise=0`` makes every rater deterministic.
"""
from __future__ import annotations

import json
import math
import random
import re
import threading
from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Union

import numpy as np

from .backend import ContinuationQuery, ContinuationResult, InflightGauge
from .decisions import soft_vector
from .data import Annotator, Dataset, Instance, Rating, Split
from .labels import LabelDistribution, tree_for_template
from .prompts import PromptTemplate
from .schema import LabelSchema, SchemaConfig


class SimulationError(ValueError):
    pass


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def label_range(schema: LabelSchema) -> tuple:
    if schema.kind == "multi_binary":
        return 0.0, float(len(schema.label_names) - 1)
    return float(schema.min_label), float(schema.max_label)


@dataclass
class SyntheticRater:
    rater_id: str
    schema: LabelSchema
    bias: float = 0.0
    noise: float = 0.0
    demographics: dict = field(default_factory=dict)

    def location(self, difficulty: float) -> float:
        lo, hi = label_range(self.schema)
        return min(hi, max(lo, difficulty + self.bias))

    def distribution(self, difficulty: float) -> LabelDistribution:
        mu = self.location(difficulty)
        if self.schema.kind == "multi_binary":
            return self._set_distribution(mu)
        labels = self.schema.labels()
        if self.noise == 0:
            # nearest label, ties to the lower one
            k = min(range(len(labels)), key=lambda i: (abs(labels[i] - mu), i))
            return LabelDistribution.point(self.schema, labels[k])
        cdf = [_sigmoid((v + 0.5 - mu) / self.noise) for v in labels[:-1]] + [1.0]
        probs = np.diff([0.0] + cdf)
        return LabelDistribution(self.schema, labels, probs / probs.sum())

    def _set_distribution(self, mu: float) -> LabelDistribution:
        names = self.schema.label_names
        z = [0.75 - abs(i - mu) for i in range(len(names))]
        if self.noise == 0:
            on = [n for n, zi in zip(names, z) if zi >= 0]
            return LabelDistribution.point(self.schema, on)
        p_on = [_sigmoid(zi / self.noise) for zi in z]
        mass = {}
        for bits in product((0, 1), repeat=len(names)):
            chosen = [n for n, b in zip(names, bits) if b]
            if not self.schema.is_valid(chosen):
                continue
            mass[self.schema.validate(chosen)] = float(np.prod([p if b else 1 - p for p, b in zip(p_on, bits)]))
        dist = LabelDistribution.from_mapping(self.schema, mass)
        return dist.normalized()

    @property
    def annotator(self) -> Annotator:
        return Annotator(self.rater_id, dict(self.demographics))

    def to_dict(self) -> dict:
        return {"rater_id": self.rater_id, "bias": self.bias, "noise": self.noise, "demographics": self.demographics}


def make_population(schema: LabelSchema, n_raters: int, bias_spread: float = 0.0, noise: float = 0.0,
                    seed: int = 0) -> list:
    """Raters with biases evenly spaced over [-bias_spread, +bias_spread] in seeded order."""
    if n_raters < 1:
        raise SimulationError("n_raters must be >= 1")
    if noise < 0 or bias_spread < 0:
        raise SimulationError("noise and bias_spread must be >= 0")
    biases = [0.0] if n_raters == 1 else list(np.linspace(-bias_spread, bias_spread, n_raters))
    rng = random.Random(seed)
    rng.shuffle(biases)
    pop = []
    for i, b in enumerate(biases):
        rid = f"r{i:03d}"
        demo = {"rater": rid, "Age": str(rng.randint(18, 70))}
        pop.append(SyntheticRater(rid, schema, round(float(b), 6), noise, demo))
    return pop


@dataclass
class SyntheticDataset:
    dataset: Dataset
    population: list
    rater_truth: dict
    population_truth: dict

    def oracle_record(self) -> dict:
        schema = self.dataset.schema
        return {
            "schema": schema.to_dict(),
            "raters": [r.to_dict() for r in self.population],
            "population_truth": {k: np.asarray(v).tolist() for k, v in sorted(self.population_truth.items())},
        }


def synthetic_template(schema: LabelSchema) -> PromptTemplate:
    kw = {}
    if schema.kind == "multi_binary":
        kw = {"output_style": "json", "label_key": "labels"}
    return PromptTemplate(
        task_description="Rate the synthetic item on the given scale.",
        input_fields=["item", "text", "difficulty"],
        schema_kind=schema.kind,
        **kw,
    )


def sample_dataset(pop: list, n_instances: Union[int, dict], ratings_per_instance: int, seed: int = 0,
                   name: str = "synthetic") -> SyntheticDataset:
    """Sample train/dev/test splits; ``n_instances`` is per split (int) or a split -> count map."""
    if not pop:
        raise SimulationError("empty population")
    if not 1 <= ratings_per_instance <= len(pop):
        raise SimulationError(f"ratings_per_instance must be in 1..{len(pop)}")
    schema = pop[0].schema
    sizes = n_instances if isinstance(n_instances, dict) else {s: n_instances for s in ("train", "dev", "test")}
    lo, hi = label_range(schema)
    rng = random.Random(seed)
    by_id = {r.rater_id: r for r in pop}
    rater_truth, pop_truth = {}, {}
    splits = {}
    for split_name, n in sizes.items():
        split = Split(split_name)
        split.annotators = {r.rater_id: r.annotator for r in pop}
        for i in range(n):
            iid = f"{split_name}-{i:04d}"
            diff = round(rng.uniform(lo, hi), 4)
            payload = {"item": iid, "text": f"synthetic item {i} of {split_name}", "difficulty": diff}
            split.instances[iid] = Instance(iid, payload)
            raters = sorted(rng.sample(sorted(by_id), ratings_per_instance))
            vecs = []
            for rid in raters:
                dist = by_id[rid].distribution(diff)
                rater_truth[(rid, iid)] = dist
                vecs.append(soft_vector(dist))
                label = dist.labels[_draw(rng, dist.probs)]
                split.ratings.append(Rating(rid, iid, label))
            pop_truth[iid] = np.mean(vecs, axis=0)
        splits[split_name] = split
    cfg = SchemaConfig(name, schema)
    return SyntheticDataset(Dataset(name, schema, splits, cfg), pop, rater_truth, pop_truth)


def _draw(rng: random.Random, probs) -> int:
    u = rng.random()
    acc = 0.0
    for k, p in enumerate(probs):
        acc += p
        if u < acc:
            return k
    return int(np.flatnonzero(np.asarray(probs) > 0)[-1])


_RATER_RE = re.compile(r"(?:^|[:;] )rater: ([^;\n]+)")


class OracleBackend:
    """Backend whose continuation probabilities reproduce each rater's true distribution.

    The rater is read from the ``rater`` demographic and the instance from the
    ``difficulty`` field of the final input line. Conditional probabilities come
    from an exact label tree whose label-set mass sits on the canonical
    ordering. Prompts it cannot key are answered uniformly and counted in
    ``fallbacks``.
    """

    approximate = True

    def __init__(self, pop: list, template: PromptTemplate):
        self.raters = {r.rater_id: r for r in pop}
        self.schema = pop[0].schema
        self.template = template
        self.tree = tree_for_template(self.schema, template, "exact")
        self._by_path = {"".join(path): (path, node) for path, node in self.tree.nodes()}
        self._canonical = self._canonical_leaves()
        self.inflight = InflightGauge()
        self.fallbacks = 0
        self._lock = threading.Lock()

    def _canonical_leaves(self) -> dict:
        """piece path -> label, one path per label."""
        close = self.template.value_close()
        leaves: dict = {}
        for path, leaf in self.tree.leaves():
            if leaf.label is not None:
                leaves.setdefault(leaf.label, []).append(path)
        out = {}
        for label, paths in leaves.items():
            if len(paths) == 1:
                out[paths[0]] = label
            else:
                want = self.template.label_text(label) + close
                out[next(p for p in paths if "".join(p) == want)] = label
        return out

    def _mass(self, pieces: tuple, dist: dict) -> float:
        k = len(pieces)
        return sum(dist[label] for p, label in self._canonical.items() if p[:k] == pieces)

    def _key(self, prefix: str):
        t = self.template
        if t.turn_open not in prefix:
            return None
        head, partial = prefix.rsplit(t.turn_open, 1)
        if not partial.startswith(t.output_prefix()):
            return None
        partial = partial[len(t.output_prefix()):]
        m = _RATER_RE.search(head)
        if m is None or m.group(1) not in self.raters:
            return None
        try:
            difficulty = float(json.loads(head.rstrip("\n").split("\n")[-1])["difficulty"])
        except (ValueError, KeyError, TypeError):
            return None
        return self.raters[m.group(1)], difficulty, partial

    def _uniform(self, q: ContinuationQuery) -> ContinuationResult:
        n = len(q.candidates)
        return ContinuationResult([1.0 / n] * n, 0.0)

    def query(self, q: ContinuationQuery) -> ContinuationResult:
        with self.inflight:
            key = self._key(q.prefix)
            hit = None if key is None else self._by_path.get(key[2])
            if hit is None:
                with self._lock:
                    self.fallbacks += 1
                return self._uniform(q)
            rater, difficulty, _ = key
            pieces, node = hit
            dist = rater.distribution(difficulty).as_dict()
            total = self._mass(pieces, dist)
            if total <= 0:
                return self._uniform(q)
            probs = [self._mass(pieces + (c,), dist) / total if c in node.children else 0.0 for c in q.candidates]
            return ContinuationResult.from_probs(probs)

    def count_tokens(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


def oracle_backend(pop: list, template: Optional[PromptTemplate] = None) -> OracleBackend:
    return OracleBackend(pop, template or synthetic_template(pop[0].schema))


def population_from_record(rec: dict) -> list:
    schema = LabelSchema.from_dict(rec["schema"])
    return [SyntheticRater(r["rater_id"], schema, r["bias"], r["noise"], dict(r["demographics"])) for r in rec["raters"]]
