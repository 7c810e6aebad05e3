"""Item-level scores, confidence intervals, Wilcoxon tests and tie-clustered leaderboards."""
from __future__ import annotations

import json
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import reduce
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .data import Dataset, Rating, Split
from .decisions import PerspectivistPrediction, SoftPrediction, one_hot, soft_labels
from .schema import LabelSchema

EXACT_MAX_N = 25


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ItemScore:
    instance_id: str
    score: float
    annotator_id: Optional[str] = None

    @property
    def key(self) -> tuple:
        return (self.annotator_id, self.instance_id)


# ---------------------------------------------------------------- distances

def _pair(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise MetricError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return p, q


def manhattan(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.abs(p - q).sum())


def wasserstein_1d(p, q) -> float:
    """W1 between histograms on unit-spaced ordered bins (sum of CDF gaps)."""
    p, q = _pair(p, q)
    return float(np.abs(np.cumsum(p - q)[:-1]).sum())


# ---------------------------------------------------------------- item scores

def perspectivist_item_error(pred, gold, schema: LabelSchema, multi_mode: str = "per_label") -> float:
    if schema.kind == "likert":
        return float(abs(int(pred) - int(gold)))
    if schema.kind == "binary":
        return float(int(pred) != int(gold))
    if multi_mode == "exact_set":
        return float(tuple(pred) != tuple(gold))
    if multi_mode != "per_label":
        raise MetricError(f"unknown multi_binary scoring mode {multi_mode!r}")
    return float(np.mean([(n in pred) != (n in gold) for n in schema.label_names]))


def score_perspectivist(preds, gold: Sequence[Rating], schema: LabelSchema, multi_mode: str = "per_label") -> list:
    """One ItemScore per gold rating.

    ``preds`` is a sequence of PerspectivistPrediction or a mapping
    ``(annotator_id, instance_id) -> label``.
    """
    if not isinstance(preds, dict):
        preds = {(p.annotator_id, p.instance_id): p.label for p in preds}
    gold = [r for r in gold if r.label is not None]
    missing = [(r.annotator_id, r.instance_id) for r in gold if (r.annotator_id, r.instance_id) not in preds]
    if missing:
        shown = ", ".join(f"({a}, {i})" for a, i in missing[:10])
        more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
        raise MetricError(f"{len(missing)} gold ratings lack predictions: {shown}{more}")
    out = []
    for r in gold:
        pred = schema.validate(preds[(r.annotator_id, r.instance_id)])
        out.append(ItemScore(r.instance_id, perspectivist_item_error(pred, r.label, schema, multi_mode), r.annotator_id))
    return out


def gold_soft_labels(split: Split, schema: LabelSchema) -> dict:
    """instance_id -> empirical label frequencies of its labeled ratings.

    For label sets the vector holds per-name positive frequencies.
    """
    by_inst = defaultdict(list)
    for r in split.ratings:
        if r.label is not None:
            by_inst[r.instance_id].append(r.label)
    return {iid: np.mean([one_hot(schema, l) for l in labs], axis=0) for iid, labs in by_inst.items()}


def soft_metric(schema: LabelSchema):
    return wasserstein_1d if schema.kind == "likert" else manhattan


def score_soft(preds, gold: dict, schema: LabelSchema) -> list:
    if not isinstance(preds, dict):
        preds = {p.instance_id: p for p in preds}
    missing = sorted(set(gold) - set(preds))
    if missing:
        raise MetricError(f"{len(missing)} instances lack soft predictions: {missing[:10]}")
    metric = soft_metric(schema)
    out = []
    for iid in sorted(gold):
        p = preds[iid]
        vec = p.probs if isinstance(p, SoftPrediction) else p
        out.append(ItemScore(iid, metric(vec, gold[iid])))
    return out


# ---------------------------------------------------------------- summary stats

def mean_ci(scores, z: float = 1.96, ddof: int = 0) -> tuple:
    """(mean, z * SD / sqrt(n)). Half-width is 0 for a single item."""
    x = np.array([s.score if isinstance(s, ItemScore) else s for s in scores], dtype=float)
    if x.size == 0:
        raise MetricError("no scores")
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(z * x.std(ddof=ddof) / math.sqrt(x.size))


def _ranks(a: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) of a 1-D array."""
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sa = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _signed_rank_setup(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"paired samples differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise MetricError("no paired items")
    # rounding keeps float noise from splitting ties or faking non-zero differences
    d = np.round(a - b, 12)
    d = d[d != 0]
    r = _ranks(np.abs(d))
    return d, r


def _exact_p(ranks2: np.ndarray, w2: int) -> float:
    """Two-sided p of the permutation distribution of W+ over doubled integer ranks."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1
    hi = 0
    for r in ranks2.astype(int):
        counts[r:hi + r + 1] = counts[r:hi + r + 1] + counts[:hi + 1]
        hi += r
    # 2*W+ - total is symmetric about 0; extreme means |2w - total| >= observed.
    obs = abs(2 * w2 - total)
    support = np.arange(total + 1)
    extreme = np.abs(2 * support - total) >= obs
    p = counts[extreme].sum() / counts.sum()
    return float(min(1.0, p))


def _approx_p(d: np.ndarray, r: np.ndarray) -> float:
    """Normal approximation with an Edgeworth kurtosis term.

    W+ is a sum of independent rank * Bernoulli(1/2) terms, so its cumulants
    are exact under ties: k2 = sum(r^2)/4, k3 = 0, k4 = -sum(r^4)/8. The
    continuity correction is half the lattice step of W+ (gcd of the ranks).
    """
    k2 = float((r ** 2).sum()) / 4
    if k2 <= 0:
        return 1.0
    k4 = -float((r ** 4).sum()) / 8
    w = float(r[d > 0].sum())
    mu = float(r.sum()) / 2
    step = reduce(math.gcd, np.rint(2 * r).astype(int).tolist()) / 2
    x = max(0.0, abs(w - mu) - step / 2) / math.sqrt(k2)
    tail = norm.sf(x) + norm.pdf(x) * (k4 / k2 ** 2) / 24 * (x ** 3 - 3 * x)
    return float(min(1.0, max(0.0, 2 * tail)))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped and tied |differences| share their average
    rank. ``method="auto"`` uses the exact permutation distribution (given the
    tie pattern) when at most 25 non-zero differences remain, and an
    Edgeworth-corrected normal approximation otherwise.
    """
    d, r = _signed_rank_setup(a, b)
    n = len(d)
    if n == 0:
        return 1.0
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        r2 = np.rint(2 * r).astype(int)
        return _exact_p(r2, int(r2[d > 0].sum()))
    if method == "approx":
        return _approx_p(d, r)
    raise MetricError(f"unknown method {method!r}")


# ---------------------------------------------------------------- ranking

@dataclass
class LeaderboardEntry:
    system: str
    mean: float
    ci: float
    rank: int
    n_items: int
    p_vs_leader: Optional[float] = None


@dataclass
class RankedLeaderboard:
    entries: list
    alpha: float = 0.05
    title: str = ""

    def ranks(self) -> dict:
        return {e.system: e.rank for e in self.entries}

    def to_dict(self) -> dict:
        return {"title": self.title, "alpha": self.alpha, "entries": [e.__dict__ for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        rows = [("System", "Score", "95% CI", "Rank", "p vs leader")]
        for e in self.entries:
            p = "-" if e.p_vs_leader is None else f"{e.p_vs_leader:.4f}"
            rows.append((e.system, f"{e.mean:.3f}", f"±{e.ci:.3f}", str(e.rank), p))
        return _align(rows, self.title)


def _align(rows, title: str = "") -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [title] if title else []
    for k, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _align_scores(systems: dict) -> tuple:
    names = list(systems)
    first = systems[names[0]]
    if len(first) and isinstance(first[0], ItemScore):
        keysets = {n: [s.key for s in systems[n]] for n in names}
        base = set(keysets[names[0]])
        for n in names[1:]:
            other = set(keysets[n])
            if other != base:
                only_a = sorted(base - other, key=str)[:5]
                only_b = sorted(other - base, key=str)[:5]
                raise MetricError(f"{n!r} is not paired with {names[0]!r}: missing {only_a}, extra {only_b}")
        order = sorted(base, key=str)
        vecs = {}
        for n in names:
            m = {s.key: s.score for s in systems[n]}
            vecs[n] = np.array([m[k] for k in order])
        return vecs, len(order)
    lens = {len(v) for v in systems.values()}
    if len(lens) != 1:
        raise MetricError(f"unpaired score vectors of lengths {sorted(lens)}")
    return {n: np.asarray([float(x) for x in v]) for n, v in systems.items()}, lens.pop()


def rank_clusters(systems: dict, alpha: float = 0.05, title: str = "", method: str = "auto") -> RankedLeaderboard:
    """Sequential-leader tie clustering.

    Systems are sorted by mean score (lower is better). Walking down the list,
    each system is compared with the current cluster leader by a two-sided
    Wilcoxon test; it shares the leader's rank while p >= alpha. The first
    significant difference opens a new cluster (next rank) led by that system.
    """
    if not systems:
        raise MetricError("no systems to rank")
    vecs, n = _align_scores(systems)
    order = sorted(vecs, key=lambda s: (float(vecs[s].mean()), s))
    entries = []
    leader, rank = order[0], 1
    for name in order:
        p = None
        if name != leader:
            p = wilcoxon_signed_rank(vecs[leader], vecs[name], method=method)
            if p < alpha:
                leader, rank = name, rank + 1
        m, ci = mean_ci(vecs[name])
        entries.append(LeaderboardEntry(name, m, ci, rank, n, p))
    return RankedLeaderboard(entries, alpha, title)


def average_ranks(boards: dict) -> dict:
    """Leaderboard summary: per-dataset (score, rank) plus average rank and its position."""
    systems = []
    for b in boards.values():
        for e in b.entries:
            if e.system not in systems:
                systems.append(e.system)
    rows = {}
    for s in systems:
        cells = {}
        for ds, b in boards.items():
            for e in b.entries:
                if e.system == s:
                    cells[ds] = {"score": e.mean, "ci": e.ci, "rank": e.rank}
        ranks = [c["rank"] for c in cells.values()]
        rows[s] = {"datasets": cells, "average_rank": float(np.mean(ranks)) if len(cells) == len(boards) else None}
    ranked = sorted((r["average_rank"], s) for s, r in rows.items() if r["average_rank"] is not None)
    for s, r in rows.items():
        if r["average_rank"] is not None:
            r["average_rank_position"] = 1 + sum(1 for a, _ in ranked if a < r["average_rank"])
    return rows


def summary_table(boards: dict, title: str = "") -> str:
    rows = average_ranks(boards)
    header = ("System",) + tuple(boards) + ("Average Rank",)
    lines = [header]
    for s, r in rows.items():
        cells = [s]
        for ds in boards:
            c = r["datasets"].get(ds)
            cells.append("-" if c is None else f"{c['score']:.3f} ({c['rank']})")
        avg = r["average_rank"]
        cells.append("-" if avg is None else f"{avg:g} ({r['average_rank_position']})")
        lines.append(tuple(cells))
    return _align(lines, title)


# ---------------------------------------------------------------- baselines

def majority_label(d: Dataset):
    train = d.split("train").labeled_ratings()
    if not train:
        raise MetricError(f"dataset {d.name!r} has no labeled train ratings")
    counts = Counter(r.label for r in train)
    labels = d.schema.labels()
    return max(labels, key=lambda l: (counts.get(l, 0), -labels.index(l)))


def baseline(kind: str, d: Dataset, task: str = "perspectivist", split: str = "test", seed: int = 0):
    """Most-frequent or random baseline predictions for a split.

    perspectivist: list of PerspectivistPrediction over the split's assigned
    (annotator, instance) pairs. soft: list of SoftPrediction per instance.
    """
    schema = d.schema
    target = d.split(split)
    if kind == "most_frequent":
        lab = majority_label(d)
        if task == "perspectivist":
            return [PerspectivistPrediction(r.annotator_id, r.instance_id, lab) for r in target.ratings]
        vec = one_hot(schema, lab)
        return [SoftPrediction(iid, soft_labels(schema), vec.copy(), "most_frequent") for iid in sorted(target.instances)]
    if kind == "random":
        if not d.split("train").labeled_ratings():
            raise MetricError(f"dataset {d.name!r} has no labeled train ratings")
        labels = schema.labels()
        if task == "perspectivist":
            rng = random.Random(seed)
            return [PerspectivistPrediction(r.annotator_id, r.instance_id, rng.choice(labels)) for r in target.ratings]
        vec = np.mean([one_hot(schema, l) for l in labels], axis=0)
        return [SoftPrediction(iid, soft_labels(schema), vec.copy(), "random") for iid in sorted(target.instances)]
    raise MetricError(f"unknown baseline {kind!r}")
