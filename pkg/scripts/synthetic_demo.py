"""Simulate a rater population and run every pipeline stage on it through the CLI.

Usage: python3 scripts/synthetic_demo.py [--kind likert] [--workdir runs/demo]
"""
import argparse
import sys
from pathlib import Path

from perspectivist.cli import main


def step(*argv) -> None:
    code = main([str(a) for a in argv])
    if code != 0:
        sys.exit(f"step {argv[0]} failed with exit code {code}")


def run(kind: str, workdir: Path) -> None:
    data = workdir / "data"
    oracle = workdir / "data.oracle.json"
    dev, test = workdir / "dev", workdir / "test"
    sim = ["--kind", kind, "--instances", 50, "--raters", 4, "--seed", 7]
    if kind == "likert":
        sim += ["--min-label", -5, "--max-label", 5, "--bias-spread", 1.5, "--noise", 0.8]
    else:
        sim += ["--bias-spread", 0.3, "--noise", 0.15 if kind == "binary" else 0.3]
    step("simulate", "--out", data, "--name", "demo", *sim)
    step("infer", "--dataset", data, "--oracle", oracle, "--split", "dev", "--output-dir", dev)
    step("infer", "--dataset", data, "--oracle", oracle, "--output-dir", test, "--max-concurrency", 4)
    step("decide", "--dataset", data, "--output-dir", test)
    step("aggregate", "--dataset", data, "--output-dir", test, "--dev-distributions", dev / "distributions.jsonl")
    step("rank", "--dataset", data, "--output-dir", test, "--task", "perspectivist", "--baselines",
         "--submission", f"ours={test / 'perspectivist.tsv'}")
    step("rank", "--dataset", data, "--output-dir", test, "--task", "soft", "--baselines",
         "--submission", f"ours={test / 'soft.jsonl'}")
    step("export-sft", "--dataset", data, "--output-dir", workdir / "sft", "--group-size", 20)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kind", choices=["binary", "likert", "multi_binary"], default="likert")
    ap.add_argument("--workdir", default="runs/demo")
    a = ap.parse_args()
    run(a.kind, Path(a.workdir))
