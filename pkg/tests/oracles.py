"""Independent reference implementations used to check the package.

Nothing here imports the code under test's algorithms; each oracle recomputes
its quantity by brute force or by a different method.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.stats import rankdata


def transport_cost(p, q) -> float:
    """Minimal transport cost on a line via the north-west-corner greedy plan.

    For cost |i - j| on ordered bins the monotone greedy plan is optimal.
    """
    p = [float(x) for x in p]
    q = [float(x) for x in q]
    i = j = 0
    cost = 0.0
    while i < len(p) and j < len(q):
        move = min(p[i], q[j])
        cost += move * abs(i - j)
        p[i] -= move
        q[j] -= move
        if p[i] <= 1e-15:
            i += 1
        if j < len(q) and q[j] <= 1e-15:
            j += 1
    return cost


def transport_lp(p, q) -> float:
    """Same quantity as an explicit linear program."""
    from scipy.optimize import linprog

    n = len(p)
    c = [abs(i - j) for i in range(n) for j in range(n)]
    a_eq, b_eq = [], []
    for i in range(n):
        a_eq.append([1.0 if k // n == i else 0.0 for k in range(n * n)])
        b_eq.append(p[i])
    for j in range(n):
        a_eq.append([1.0 if k % n == j else 0.0 for k in range(n * n)])
        b_eq.append(q[j])
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return float(res.fun)


def manhattan_sum(p, q) -> float:
    total = 0.0
    for a, b in zip(p, q):
        total += abs(a - b)
    return total


def median_argmin_set(labels, probs, tol=1e-12) -> set:
    """Every label minimizing expected absolute distance."""
    costs = [sum(p * abs(l - c) for l, p in zip(labels, probs)) for c in labels]
    best = min(costs)
    return {c for c, v in zip(labels, costs) if v <= best + tol}


def label_piece_sequences(kind, labels=None, names=None, style="bare", mode="exact", close=None) -> dict:
    """label -> list of piece sequences, built directly from the label format."""
    out = {}
    if kind in ("binary", "likert"):
        for v in labels:
            if style == "json":
                out[v] = [(" -" if v < 0 else " ", str(abs(v)))]
            else:
                out[v] = [("-", str(abs(v))) if v < 0 else (str(v),)]
        return out
    for size in range(1, len(names) + 1):
        for combo in itertools.combinations(names, size):
            key = tuple(combo)
            seqs = []
            if mode == "exact":
                for perm in itertools.permutations(combo):
                    seqs.append((perm[0],) + tuple(" " + x for x in perm[1:]) + (close,))
            elif size == 1:
                seqs.append((combo[0], close))
            elif size == 2:
                a, b = combo
                seqs.extend([(a, " " + b), (b, " " + a)])
            if seqs:
                out[key] = seqs
    return out


def internal_nodes(seqs: dict) -> dict:
    """path tuple -> ordered candidate list, for every proper prefix of every sequence."""
    nodes: dict = {}
    for alts in seqs.values():
        for s in alts:
            for k in range(len(s)):
                cands = nodes.setdefault(s[:k], [])
                if s[k] not in cands:
                    cands.append(s[k])
    return nodes


def enumerate_paths(seqs: dict, cond) -> dict:
    """label -> normalized probability, summing the product of conditionals over each path.

    ``cond(path, piece)`` is the conditional probability of ``piece`` after ``path``.
    """
    raw = {}
    for label, alts in seqs.items():
        total = 0.0
        for s in alts:
            prod = 1.0
            for k in range(len(s)):
                prod *= cond(s[:k], s[k])
            total += prod
        raw[label] = total
    z = sum(raw.values())
    return {k: v / z for k, v in raw.items()}


def signed_rank_p_enumeration(a, b) -> float:
    """Two-sided Wilcoxon p by enumerating every sign assignment (small n only)."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = np.round(d, 12)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    r = rankdata(np.abs(d))
    w_obs = r[d > 0].sum()
    mu = r.sum() / 2
    obs = abs(w_obs - mu)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(rk for rk, s in zip(r, signs) if s)
        if abs(w - mu) >= obs - 1e-9:
            hits += 1
    return hits / 2 ** n


def bayes_perspectivist_error(dist_probs, labels, kind) -> float:
    """Expected loss of the loss-optimal decision under a known distribution."""
    if kind == "likert":
        return min(sum(p * abs(l - c) for l, p in zip(labels, dist_probs)) for c in labels)
    return 1.0 - max(dist_probs)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def approx_tokens(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / 4)


def random_mock_table(seqs: dict, rng, marker: str = "<P>", leak: float = 0.2) -> tuple:
    """Random sub-stochastic table over the tree implied by ``seqs``.

    Returns ``(table, cond)`` where ``table`` feeds MockBackend (keys are the
    marker plus the joined path) and ``cond(path, piece)`` reads it back.
    """
    table = {}
    for path, cands in internal_nodes(seqs).items():
        w = rng.random(len(cands)) + 1e-3
        w = w / w.sum() * (1.0 - leak * rng.random())
        for c, p in zip(cands, w):
            table[(marker + "".join(path), c)] = float(p)

    def cond(path, piece):
        return table.get((marker + "".join(path), piece), 0.0)

    return table, cond
