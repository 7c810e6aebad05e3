"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 transport failure,
4 data/validation error, 5 inference failure rate above threshold.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from . import metrics, pipeline, sft
from .backend import BackendError, ConfigurationError, TransportError, make_backend
from .data import DatasetError, dataset_stats, load_dataset, rater_history, save_dataset
from .decisions import STRATEGIES
from .labels import TreeError, tree_for_template
from .lewidi import convert_release_to_dir
from .metrics import MetricError
from .prompts import PRESET_TEMPLATES, PromptError, PromptTemplate, build_prompt, load_template, save_template
from .schema import LabelSchema, SchemaError
from .synthetic import make_population, oracle_backend, population_from_record, sample_dataset, synthetic_template

log = logging.getLogger("perspectivist")

EXIT_CONFIG, EXIT_TRANSPORT, EXIT_DATA, EXIT_FAILURES = 2, 3, 4, 5


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    schema: Optional[str] = None
    template: Optional[str] = None
    budget_tokens: int = 3000
    headroom: int = 64
    seed: int = 0
    backend: dict = field(default_factory=lambda: {"kind": "http"})
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    output_dir: str = "runs/default"
    include_demographics: bool = True
    max_examples: Optional[int] = None
    tree_mode: str = "exact"
    split: str = "test"
    failure_threshold: float = 0.05
    multi_mode: str = "per_label"

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if not path:
            return cls()
        text = Path(path).read_text(encoding="utf-8")
        raw = yaml.safe_load(text) if path.endswith((".yaml", ".yml")) else json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw or {}) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**(raw or {}))

    def hash(self) -> str:
        return pipeline.config_hash(asdict(self))


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for name in ("dataset", "schema", "template", "budget_tokens", "headroom", "seed", "output_dir",
                 "tree_mode", "split", "failure_threshold", "multi_mode", "max_examples"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "no_demographics", False):
        cfg.include_demographics = False
    if getattr(args, "one_example", False):
        cfg.max_examples = 1
    if getattr(args, "strategies", None):
        cfg.strategies = args.strategies
    if getattr(args, "endpoint", None):
        cfg.backend = {**cfg.backend, "kind": "http", "endpoint": args.endpoint}
    if getattr(args, "oracle", None):
        cfg.backend = {"kind": "oracle", "population": args.oracle}
    if getattr(args, "max_concurrency", None):
        cfg.backend = {**cfg.backend, "max_concurrency": args.max_concurrency}
    return cfg


def _dataset(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or config 'dataset')")
    return load_dataset(cfg.dataset, cfg.schema)


def _template(cfg: RunConfig, d) -> PromptTemplate:
    if cfg.template in PRESET_TEMPLATES:
        return PRESET_TEMPLATES[cfg.template]
    if cfg.template:
        return load_template(cfg.template)
    local = Path(cfg.dataset) / "template.json"
    if local.exists():
        return load_template(local)
    if d.name in PRESET_TEMPLATES:
        return PRESET_TEMPLATES[d.name]
    raise ConfigError(f"no template for dataset {d.name!r}; pass --template")


def _tree(cfg: RunConfig, d, t: PromptTemplate):
    return tree_for_template(d.schema, t, cfg.tree_mode, d.name)


def _backend(cfg: RunConfig, t: PromptTemplate):
    spec = dict(cfg.backend)
    if spec.get("kind") == "oracle":
        rec = json.loads(Path(spec["population"]).read_text(encoding="utf-8"))
        return oracle_backend(population_from_record(rec), t)
    return make_backend(spec)


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands

def cmd_ingest_stats(cfg, args) -> int:
    d = _dataset(cfg)
    splits = [args.stats_split] if args.stats_split else list(d.splits)
    reports = [dataset_stats(d, s) for s in splits]
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2))
    else:
        print("\n\n".join(r.to_text() for r in reports))
    return 0


def cmd_build_prompts(cfg, args) -> int:
    d = _dataset(cfg)
    t = _template(cfg, d)
    if not cfg.include_demographics:
        t = PromptTemplate(**{**t.to_dict(), "include_demographics": False})
    split = d.split(cfg.split)
    train = d.splits["train"].instances if "train" in d.splits else {}
    out = _out(cfg) / "prompts.jsonl"
    with out.open("w", encoding="utf-8") as f:
        for r in split.ratings:
            p = build_prompt(
                t, d.annotator(r.annotator_id),
                rater_history(d, r.annotator_id, exclude_instance=r.instance_id),
                split.instances[r.instance_id], cfg.budget_tokens,
                sft.derive_seed(cfg.seed, d.name, r.annotator_id, r.instance_id),
                instances=train, headroom=cfg.headroom, max_examples=cfg.max_examples,
            )
            f.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_infer(cfg, args) -> int:
    d = _dataset(cfg)
    t = _template(cfg, d)
    backend = _backend(cfg, t)
    tree = _tree(cfg, d, t)
    out = _out(cfg)
    manifest = pipeline.RunManifest(out / "manifest.jsonl")
    manifest.append({"type": "run", "config_hash": cfg.hash(), "config": asdict(cfg)})
    settings = pipeline.InferenceSettings(
        split=cfg.split, budget_tokens=cfg.budget_tokens, headroom=cfg.headroom, seed=cfg.seed,
        max_examples=cfg.max_examples, include_demographics=cfg.include_demographics,
        max_concurrency=int(cfg.backend.get("max_concurrency", 1)),
    )
    rep = pipeline.infer(d, t, backend, tree, settings, out_path=out / "distributions.jsonl", manifest=manifest)
    print(f"inferred {rep.succeeded} items ({rep.degenerate} degenerate), {rep.failed} failed, "
          f"{rep.skipped} already done -> {out / 'distributions.jsonl'}")
    if rep.attempted and rep.failed == rep.attempted and set(rep.error_types) == {"TransportError"}:
        print("every item failed with a transport error; is the backend reachable?", file=sys.stderr)
        return EXIT_TRANSPORT
    if rep.failure_rate > cfg.failure_threshold:
        print(f"failure rate {rep.failure_rate:.3f} exceeds threshold {cfg.failure_threshold}", file=sys.stderr)
        return EXIT_FAILURES
    return 0


def _dist_path(cfg, args) -> Path:
    return Path(args.distributions) if getattr(args, "distributions", None) else Path(cfg.output_dir) / "distributions.jsonl"


def cmd_decide(cfg, args) -> int:
    d = _dataset(cfg)
    dists = pipeline.load_distributions(_dist_path(cfg, args), d.schema)
    out = _out(cfg) / "perspectivist.tsv"
    pipeline.write_perspectivist_tsv(pipeline.decide_all(dists), out, d.schema)
    print(f"wrote {out}")
    return 0


def cmd_aggregate(cfg, args) -> int:
    d = _dataset(cfg)
    dists = pipeline.load_distributions(_dist_path(cfg, args), d.schema)
    out = _out(cfg)
    for strat in cfg.strategies:
        pipeline.write_soft_jsonl(pipeline.aggregate_all(dists, strat), out / f"soft_{strat}.jsonl", d.schema)
    chosen = cfg.strategies[0]
    if args.dev_distributions:
        dev = pipeline.load_distributions(args.dev_distributions, d.schema)
        chosen, scores = pipeline.choose_strategy(dev, d, cfg.strategies)
        (out / "strategy.json").write_text(json.dumps({"chosen": chosen, "dev_scores": scores}, indent=2) + "\n")
        print("dev scores: " + ", ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    pipeline.write_soft_jsonl(pipeline.aggregate_all(dists, chosen), out / "soft.jsonl", d.schema)
    print(f"wrote {out / 'soft.jsonl'} (strategy: {chosen})")
    return 0


def _read_submission(path: str, task: str, d):
    if task == "perspectivist":
        return pipeline.read_perspectivist_tsv(path, d.schema)
    return pipeline.read_soft_jsonl(path)


def cmd_score(cfg, args) -> int:
    d = _dataset(cfg)
    preds = _read_submission(args.submission, args.task, d)
    items = pipeline.score_submission(d, args.task, preds, cfg.split, cfg.multi_mode)
    mean, ci = metrics.mean_ci(items)
    report = {"dataset": d.name, "task": args.task, "split": cfg.split, "mean": mean, "ci95": ci,
              "n_items": len(items), "items": [s.__dict__ for s in items]}
    out = _out(cfg) / f"scores_{args.task}.json"
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(f"{d.name} {args.task}: {mean:.4f} ± {ci:.4f} over {len(items)} items -> {out}")
    return 0


def _parse_named(pairs) -> dict:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"submission {p!r} must look like NAME=PATH")
        name, path = p.split("=", 1)
        out[name] = path
    return out


def cmd_rank(cfg, args) -> int:
    boards = {}
    if args.board:
        spec = json.loads(Path(args.board).read_text(encoding="utf-8"))
        entries = spec["datasets"]
        task = spec.get("task", args.task)
    else:
        if not cfg.dataset:
            raise ConfigError("rank needs --board or --dataset with --submission NAME=PATH")
        entries = {Path(cfg.dataset).name: {"data": cfg.dataset, "submissions": _parse_named(args.submission or [])}}
        task = args.task
    for name, e in entries.items():
        d = load_dataset(e["data"], e.get("schema"))
        systems = {}
        for sys_name, path in e["submissions"].items():
            preds = _read_submission(path, task, d)
            systems[sys_name] = pipeline.score_submission(d, task, preds, cfg.split, cfg.multi_mode)
        if args.baselines:
            for kind in ("most_frequent", "random"):
                preds = metrics.baseline(kind, d, task, cfg.split, cfg.seed)
                systems[f"{kind} baseline"] = pipeline.score_submission(d, task, preds, cfg.split, cfg.multi_mode)
        boards[name] = metrics.rank_clusters(systems, args.alpha, title=f"{name} ({task})")
    out = _out(cfg)
    summary = metrics.average_ranks(boards)
    (out / f"leaderboard_{task}.json").write_text(json.dumps(
        {"task": task, "datasets": {k: b.to_dict() for k, b in boards.items()}, "summary": summary}, indent=2) + "\n")
    text = "\n\n".join(b.to_text() for b in boards.values()) + "\n\n" + metrics.summary_table(boards, f"{task} summary")
    (out / f"leaderboard_{task}.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_export_sft(cfg, args) -> int:
    d = _dataset(cfg)
    t = _template(cfg, d)
    if args.group_size:
        seqs = sft.export_grouped(d, t, args.group_size, cfg.seed)
    else:
        seqs = sft.export_per_annotator(d, t, args.max_length, cfg.seed)
    path, desc = sft.emit(seqs, _out(cfg) / "sft.jsonl", sft.DATASET_SFT, t)
    print(f"wrote {len(seqs)} sequences to {path} (descriptor {desc})")
    return 0


def cmd_simulate(cfg, args) -> int:
    kind = args.kind
    if kind == "binary":
        schema = LabelSchema.binary()
    elif kind == "likert":
        schema = LabelSchema.likert(args.min_label, args.max_label)
    else:
        schema = LabelSchema.multi_binary(args.label_names.split(","))
    pop = make_population(schema, args.raters, args.bias_spread, args.noise, cfg.seed)
    sd = sample_dataset(pop, args.instances, args.ratings_per_instance, cfg.seed, name=args.name)
    out = Path(args.out)
    save_dataset(sd.dataset, out)
    save_template(synthetic_template(schema), out / "template.json")
    oracle = out.parent / f"{out.name}.oracle.json"
    oracle.write_text(json.dumps(sd.oracle_record(), indent=1) + "\n", encoding="utf-8")
    print(f"wrote synthetic dataset to {out} and oracle to {oracle}")
    return 0


def cmd_convert_release(cfg, args) -> int:
    out = convert_release_to_dir(args.src, args.name, args.out)
    print(f"wrote {args.name} in package layout to {out}")
    return 0


COMMANDS = {
    "ingest-stats": cmd_ingest_stats,
    "build-prompts": cmd_build_prompts,
    "infer": cmd_infer,
    "decide": cmd_decide,
    "aggregate": cmd_aggregate,
    "score": cmd_score,
    "rank": cmd_rank,
    "export-sft": cmd_export_sft,
    "simulate": cmd_simulate,
    "convert-release": cmd_convert_release,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run config")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--schema", help="schema sidecar (default <dataset>/schema.json)")
    common.add_argument("--template", help="template file or preset name (MP, CSC, Par, VEN)")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--split")
    common.add_argument("--multi-mode", dest="multi_mode", choices=["per_label", "exact_set"])
    common.add_argument("-v", "--verbose", action="store_true")

    prompt_opts = argparse.ArgumentParser(add_help=False)
    prompt_opts.add_argument("--budget", dest="budget_tokens", type=int)
    prompt_opts.add_argument("--headroom", type=int)
    prompt_opts.add_argument("--no-demographics", action="store_true")
    prompt_opts.add_argument("--one-example", action="store_true", help="at most one in-context example")
    prompt_opts.add_argument("--max-examples", dest="max_examples", type=int)

    p = argparse.ArgumentParser(prog="perspectivist", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest-stats", parents=[common], help="dataset statistics")
    s.add_argument("--stats-split", dest="stats_split")
    s.add_argument("--json", action="store_true")

    sub.add_parser("build-prompts", parents=[common, prompt_opts], help="render prompts to JSONL for audit")

    s = sub.add_parser("infer", parents=[common, prompt_opts], help="label distributions per (rater, instance)")
    s.add_argument("--tree-mode", dest="tree_mode", choices=["exact", "four_pass"])
    s.add_argument("--endpoint", help="override backend endpoint URL")
    s.add_argument("--oracle", help="synthetic oracle file; uses the oracle backend")
    s.add_argument("--max-concurrency", dest="max_concurrency", type=int)
    s.add_argument("--failure-threshold", dest="failure_threshold", type=float)

    s = sub.add_parser("decide", parents=[common], help="perspectivist submission from distributions")
    s.add_argument("--distributions")

    s = sub.add_parser("aggregate", parents=[common], help="soft submissions from distributions")
    s.add_argument("--distributions")
    s.add_argument("--dev-distributions", help="dev-split distributions for strategy selection")
    s.add_argument("--strategies", nargs="+", choices=list(STRATEGIES))

    s = sub.add_parser("score", parents=[common], help="item scores for one submission")
    s.add_argument("--task", choices=["perspectivist", "soft"], required=True)
    s.add_argument("--submission", required=True)

    s = sub.add_parser("rank", parents=[common], help="tie-clustered leaderboard")
    s.add_argument("--task", choices=["perspectivist", "soft"], default="perspectivist")
    s.add_argument("--submission", action="append", help="NAME=PATH (repeatable)")
    s.add_argument("--board", help="JSON: {task, datasets: {name: {data, submissions: {sys: path}}}}")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--baselines", action="store_true", help="add most-frequent and random baselines")

    s = sub.add_parser("export-sft", parents=[common], help="loss-masked training sequences")
    s.add_argument("--group-size", type=int, help="chunk each rater's ratings (otherwise one sequence per rater)")
    s.add_argument("--max-length", type=int, default=1024)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset and its oracle")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="synthetic")
    s.add_argument("--kind", choices=["binary", "likert", "multi_binary"], default="binary")
    s.add_argument("--min-label", type=int, default=1)
    s.add_argument("--max-label", type=int, default=6)
    s.add_argument("--label-names", default="entailment,neutral,contradiction")
    s.add_argument("--raters", type=int, default=4)
    s.add_argument("--instances", type=int, default=50)
    s.add_argument("--ratings-per-instance", type=int, default=4)
    s.add_argument("--bias-spread", type=float, default=0.5)
    s.add_argument("--noise", type=float, default=0.5)

    s = sub.add_parser("convert-release", parents=[common], help="convert competition JSON files to dataset layout")
    s.add_argument("--src", required=True, help="directory holding <NAME>_<split>.json files")
    s.add_argument("--name", required=True, choices=["MP", "CSC", "Par", "VEN"])
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ConfigurationError, SchemaError, TreeError, PromptError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (DatasetError, MetricError, sft.ExportError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
