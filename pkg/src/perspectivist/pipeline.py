"""Pipeline stages shared by the CLI and experiment scripts.

Seeds: every (dataset, annotator, instance) prompt uses
``derive_seed(root_seed, dataset, annotator_id, instance_id)``; SFT shuffles use
``derive_seed(root_seed, "sft", annotator_id)``; random baselines use the root
seed directly.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import Dataset, rater_history
from .decisions import (
    PerspectivistPrediction,
    SoftPrediction,
    aggregate,
    decide,
    select_strategy,
)
from .labels import DegenerateDistributionError, LabelDistribution, LabelTree, compute_distribution
from .metrics import gold_soft_labels, mean_ci, score_perspectivist, score_soft
from .prompts import DEFAULT_BUDGET, DEFAULT_HEADROOM, PromptTemplate, build_prompt
from .sft import derive_seed

log = logging.getLogger(__name__)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


class RunManifest:
    """Append-only JSONL log of item outcomes, keyed on (dataset, annotator, instance, mode)."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    @staticmethod
    def key(rec: dict) -> tuple:
        return (rec["dataset"], rec["annotator_id"], rec["instance_id"], rec["mode"])

    def records(self) -> list:
        if not self.path.exists():
            return []
        out = []
        with self.path.open(encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    # a crash mid-write leaves at most one torn trailing line
                    log.warning("ignoring torn manifest line in %s", self.path)
        return out

    def completed(self) -> set:
        return {self.key(r) for r in self.records() if r.get("type") == "item" and r["status"] in ("ok", "degenerate")}

    def failures(self) -> list:
        done = self.completed()
        return [r for r in self.records() if r.get("type") == "item" and r["status"] == "failed" and self.key(r) not in done]

    def append(self, rec: dict) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class InferenceSettings:
    split: str = "test"
    budget_tokens: int = DEFAULT_BUDGET
    headroom: int = DEFAULT_HEADROOM
    seed: int = 0
    max_examples: Optional[int] = None
    include_demographics: bool = True
    max_concurrency: int = 1

    def mode_tag(self, tree: LabelTree) -> str:
        tag = tree.mode
        if not self.include_demographics:
            tag += "+no_demographics"
        if self.max_examples is not None:
            tag += f"+max_examples={self.max_examples}"
        return tag


@dataclass
class InferenceReport:
    attempted: int = 0
    succeeded: int = 0
    degenerate: int = 0
    failed: int = 0
    skipped: int = 0
    records: list = field(default_factory=list)
    error_types: dict = field(default_factory=dict)

    @property
    def failure_rate(self) -> float:
        return self.failed / self.attempted if self.attempted else 0.0


def infer(
    d: Dataset,
    t: PromptTemplate,
    backend,
    tree: LabelTree,
    settings: Optional[InferenceSettings] = None,
    counter=None,
    out_path=None,
    manifest: Optional[RunManifest] = None,
) -> InferenceReport:
    """Label distributions for every assigned (annotator, instance) pair of a split.

    With a manifest, pairs already completed are skipped and each outcome is
    appended; with ``out_path`` each distribution record is appended as JSONL.
    Items whose valid mass is degenerate get a uniform distribution and status
    ``degenerate``; items that raise are recorded as ``failed`` and the batch
    continues.
    """
    from concurrent.futures import ThreadPoolExecutor

    s = settings or InferenceSettings()
    if counter is None:
        counter = backend if callable(getattr(backend, "count_tokens", None)) else None
        counter = _as_counter(counter)
    if s.include_demographics != t.include_demographics:
        t = PromptTemplate(**{**t.to_dict(), "include_demographics": s.include_demographics})
    split = d.split(s.split)
    train_instances = d.splits["train"].instances if "train" in d.splits else {}
    mode = s.mode_tag(tree)
    done = manifest.completed() if manifest else set()
    report = InferenceReport()

    todo = []
    for r in split.ratings:
        if (d.name, r.annotator_id, r.instance_id, mode) in done:
            report.skipped += 1
            continue
        todo.append(r)

    def work(r):
        started = time.perf_counter()
        seed = derive_seed(s.seed, d.name, r.annotator_id, r.instance_id)
        prompt = build_prompt(
            t,
            d.annotator(r.annotator_id),
            rater_history(d, r.annotator_id, exclude_instance=r.instance_id),
            split.instances[r.instance_id],
            budget_tokens=s.budget_tokens,
            seed=seed,
            counter=counter,
            instances=train_instances,
            headroom=s.headroom,
            max_examples=s.max_examples,
        )
        n_queries = [0]

        def tick(q, res):
            n_queries[0] += 1

        status = "ok"
        try:
            dist = compute_distribution(tree, prompt, backend, on_query=tick)
        except DegenerateDistributionError:
            dist = LabelDistribution.uniform(d.schema)
            status = "degenerate"
        rec = dist.to_record(
            dataset=d.name, annotator_id=r.annotator_id, instance_id=r.instance_id, mode=mode, seed=seed,
            n_examples=prompt.example_count, prompt_tokens=prompt.token_count,
        )
        return rec, status, time.perf_counter() - started, n_queries[0]

    def run(r):
        try:
            return r, work(r), None
        except Exception as e:  # recorded per item; the batch continues
            return r, None, e

    with ThreadPoolExecutor(max_workers=max(1, s.max_concurrency)) as pool:
        for r, result, err in pool.map(run, todo):
            report.attempted += 1
            entry = {"type": "item", "dataset": d.name, "annotator_id": r.annotator_id,
                     "instance_id": r.instance_id, "mode": mode}
            if err is not None:
                report.failed += 1
                name = type(err).__name__
                report.error_types[name] = report.error_types.get(name, 0) + 1
                entry.update(status="failed", error=f"{type(err).__name__}: {err}")
                log.warning("item (%s, %s) failed: %s", r.annotator_id, r.instance_id, err)
            else:
                rec, status, latency, nq = result
                if status == "degenerate":
                    report.degenerate += 1
                    entry["warning"] = "valid label mass below floor; emitted uniform distribution"
                report.succeeded += 1
                report.records.append(rec)
                entry.update(status=status, latency=round(latency, 6), n_queries=nq)
                if out_path is not None:
                    with open(out_path, "a", encoding="utf-8") as f:
                        f.write(json.dumps(rec) + "\n")
            if manifest is not None:
                manifest.append(entry)
    return report


def _as_counter(backend):
    from .prompts import ApproxTokenCounter

    if backend is None:
        return ApproxTokenCounter()

    class _BackendCounter:
        approximate = getattr(backend, "approximate", True)

        def __call__(self, text):
            return backend.count_tokens(text)

    return _BackendCounter()


def load_distributions(path, schema) -> dict:
    """(annotator_id, instance_id) -> LabelDistribution; later records win."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[(rec["annotator_id"], rec["instance_id"])] = LabelDistribution.from_record(schema, rec)
    return out


def decide_all(dists: dict) -> list:
    return [PerspectivistPrediction(a, i, decide(dist)) for (a, i), dist in sorted(dists.items())]


def aggregate_all(dists: dict, strategy: str, decisions: Optional[list] = None) -> list:
    """One SoftPrediction per instance over all raters with a distribution for it."""
    by_inst = defaultdict(list)
    for (a, i), dist in sorted(dists.items()):
        by_inst[i].append((a, dist))
    chosen = {}
    if decisions is not None:
        chosen = {(p.annotator_id, p.instance_id): p.label for p in decisions}
    out = []
    for iid, items in sorted(by_inst.items()):
        ds = [dist for _, dist in items]
        dec = [chosen[(a, iid)] for a, _ in items] if chosen else None
        out.append(aggregate(strategy, ds, iid, dec))
    return out


def choose_strategy(dev_dists: dict, d: Dataset, strategies=("mean", "mixed"), split: str = "dev") -> tuple:
    """Score each strategy on a labeled split; returns (best, {strategy: mean loss})."""
    gold = gold_soft_labels(d.split(split), d.schema)
    scores = {}
    for strat in strategies:
        preds = {p.instance_id: p for p in aggregate_all(dev_dists, strat)}
        items = score_soft({k: v for k, v in preds.items() if k in gold}, gold, d.schema)
        scores[strat] = mean_ci(items)[0]
    return select_strategy(scores), scores


def write_perspectivist_tsv(preds, path, schema) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("annotator_id\tinstance_id\tlabel\n")
        for p in preds:
            label = ",".join(p.label) if schema.kind == "multi_binary" else str(p.label)
            f.write(f"{p.annotator_id}\t{p.instance_id}\t{label}\n")


def read_perspectivist_tsv(path, schema) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header != ["annotator_id", "instance_id", "label"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for n, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected 3 tab-separated fields")
            out.append(PerspectivistPrediction(parts[0], parts[1], schema.validate(parts[2])))
    return out


def write_soft_jsonl(preds, path, schema) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps(p.to_record(schema)) + "\n")


def read_soft_jsonl(path) -> list:
    with open(path, encoding="utf-8") as f:
        return [SoftPrediction.from_record(json.loads(line)) for line in f if line.strip()]


def score_submission(d: Dataset, task: str, preds, split: str = "test", multi_mode: str = "per_label") -> list:
    target = d.split(split)
    if task == "perspectivist":
        return score_perspectivist(preds, target.labeled_ratings(), d.schema, multi_mode)
    if task == "soft":
        return score_soft(preds, gold_soft_labels(target, d.schema), d.schema)
    raise ValueError(f"unknown task {task!r}")
